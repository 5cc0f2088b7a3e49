"""Single-file parameter container.

Layout: an ASCII header terminated by a blank line, then raw little-endian
float64 payload. The header is a magic line, a count line, and one line per
array: ``<name> <ndim> <dim...> <byte-offset>``. Offsets index into the
payload. The format is deliberately dumb so a checkpoint can be inspected
with ``head`` and parsed from any language in a few lines.
"""

from __future__ import annotations

import numpy as np

CKPT_MAGIC = "SETFORGE-CKPT-1"
DATA_MAGIC = "SETFORGE-DATA-1"


class FormatError(ValueError):
    """Malformed or truncated container file."""


def save_arrays(path, arrays: dict, magic: str = CKPT_MAGIC) -> None:
    """Write named float64 arrays. Iteration order of ``arrays`` is kept."""
    header = [magic, str(len(arrays))]
    offset = 0
    payload = []
    for name, arr in arrays.items():
        if any(ch.isspace() for ch in name):
            raise ValueError(f"array name may not contain whitespace: {name!r}")
        a = np.asarray(arr).astype("<f8", copy=False)
        dims = " ".join(str(d) for d in a.shape)
        line = f"{name} {a.ndim}" + (f" {dims}" if a.ndim else "") + f" {offset}"
        header.append(line)
        payload.append(a.tobytes())
        offset += a.nbytes
    blob = ("\n".join(header) + "\n\n").encode("ascii") + b"".join(payload)
    with open(path, "wb") as f:
        f.write(blob)


def load_arrays(path, magic: str = CKPT_MAGIC) -> dict:
    """Read a container written by :func:`save_arrays`.

    Raises :class:`FormatError` on a wrong magic line or truncated payload.
    """
    with open(path, "rb") as f:
        blob = f.read()
    sep = blob.find(b"\n\n")
    if sep < 0:
        raise FormatError(f"{path}: missing header terminator")
    lines = blob[:sep].decode("ascii", errors="replace").split("\n")
    payload = blob[sep + 2:]
    if not lines or lines[0] != magic:
        got = lines[0] if lines else ""
        raise FormatError(f"{path}: expected magic {magic!r}, got {got!r}")
    try:
        count = int(lines[1])
    except (IndexError, ValueError):
        raise FormatError(f"{path}: bad count line")
    if len(lines) != 2 + count:
        raise FormatError(f"{path}: header declares {count} arrays, "
                          f"found {len(lines) - 2} entries")
    out = {}
    for line in lines[2:]:
        fields = line.split()
        if len(fields) < 3:
            raise FormatError(f"{path}: bad manifest line {line!r}")
        name = fields[0]
        ndim = int(fields[1])
        if len(fields) != 3 + ndim:
            raise FormatError(f"{path}: bad manifest line {line!r}")
        shape = tuple(int(d) for d in fields[2:2 + ndim])
        offset = int(fields[-1])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 8 if ndim else 8
        chunk = payload[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise FormatError(f"{path}: payload truncated for array {name!r}")
        out[name] = np.frombuffer(chunk, dtype="<f8").reshape(shape).copy()
    return out
