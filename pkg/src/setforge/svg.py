"""Static SVG figure emission.

Panels are laid out on a grid: point-set panels draw one circle per element
(y flipped so digits read the right way up), image panels embed the raster
as a base64 PNG with optional box overlays. Output is byte-deterministic for
a given spec: fixed float formatting, no timestamps.
"""

from __future__ import annotations

import base64
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np


@dataclass
class PointPanel:
    points: np.ndarray            # (n, 2) in [0, 1]
    caption: str = ""
    colour: str = "#1f6fb2"


@dataclass
class ImagePanel:
    image: np.ndarray             # (h, w, 3) uint8
    boxes: list = field(default_factory=list)    # (cx, cy, w, h) normalised
    box_colours: list = field(default_factory=list)
    caption: str = ""


@dataclass
class PlotSpec:
    rows: list                    # list of rows, each a list of panels
    panel_size: int = 120
    marker: float = 1.6
    title: str = ""

    def __post_init__(self):
        if not self.rows or not any(len(r) for r in self.rows):
            raise ValueError("plot needs at least one panel")


def _f(x: float) -> str:
    return f"{x:.3f}".rstrip("0").rstrip(".")


def encode_png(image: np.ndarray) -> bytes:
    """Minimal RGB PNG writer (8-bit, no filtering but per-scanline type 0)."""
    img = np.asarray(image, dtype=np.uint8)
    h, w, c = img.shape
    if c != 3:
        raise ValueError("encode_png expects (h, w, 3)")

    def chunk(tag: bytes, payload: bytes) -> bytes:
        return (struct.pack(">I", len(payload)) + tag + payload
                + struct.pack(">I", zlib.crc32(tag + payload)))

    ihdr = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    raw = b"".join(b"\x00" + img[r].tobytes() for r in range(h))
    idat = zlib.compress(raw, 6)
    return (b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", ihdr)
            + chunk(b"IDAT", idat) + chunk(b"IEND", b""))


def _render_point_panel(panel: PointPanel, x0: float, y0: float,
                        side: float, marker: float) -> list:
    parts = [f'<rect x="{_f(x0)}" y="{_f(y0)}" width="{_f(side)}" '
             f'height="{_f(side)}" fill="#fbfbfb" stroke="#cccccc" '
             'stroke-width="1"/>']
    pts = np.asarray(panel.points, dtype=np.float64).reshape(-1, 2)
    for x, y in pts:
        # y runs downward in SVG; flip so larger y plots higher
        cx = x0 + x * side
        cy = y0 + (1.0 - y) * side
        parts.append(f'<circle cx="{_f(cx)}" cy="{_f(cy)}" r="{_f(marker)}" '
                     f'fill="{panel.colour}"/>')
    # blank caption falls back to the cardinality annotation
    caption = panel.caption if panel.caption else str(len(pts))
    parts.append(f'<text x="{_f(x0 + 3)}" y="{_f(y0 + side - 4)}" '
                 f'font-size="10" font-family="monospace" '
                 f'fill="#333333">{caption}</text>')
    return parts


def _render_image_panel(panel: ImagePanel, x0: float, y0: float,
                        side: float) -> list:
    data = base64.b64encode(encode_png(panel.image)).decode("ascii")
    parts = [f'<image x="{_f(x0)}" y="{_f(y0)}" width="{_f(side)}" '
             f'height="{_f(side)}" preserveAspectRatio="none" '
             f'href="data:image/png;base64,{data}"/>']
    colours = panel.box_colours or ["#ffd23f"] * len(panel.boxes)
    for (cx, cy, w, h), col in zip(panel.boxes, colours):
        bx = x0 + (cx - w / 2) * side
        by = y0 + (cy - h / 2) * side
        parts.append(f'<rect x="{_f(bx)}" y="{_f(by)}" width="{_f(w * side)}" '
                     f'height="{_f(h * side)}" fill="none" stroke="{col}" '
                     'stroke-width="1.2"/>')
    if panel.caption:
        parts.append(f'<text x="{_f(x0 + 3)}" y="{_f(y0 + side - 4)}" '
                     f'font-size="10" font-family="monospace" '
                     f'fill="#ffffff">{panel.caption}</text>')
    return parts


def emit_svg(spec: PlotSpec, path) -> None:
    side = float(spec.panel_size)
    pad = 6.0
    top = 18.0 if spec.title else pad
    n_cols = max(len(r) for r in spec.rows)
    width = pad + n_cols * (side + pad)
    height = top + len(spec.rows) * (side + pad)
    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_f(width)}" '
        f'height="{_f(height)}" viewBox="0 0 {_f(width)} {_f(height)}">',
        f'<rect width="{_f(width)}" height="{_f(height)}" fill="#ffffff"/>',
    ]
    if spec.title:
        parts.append(f'<text x="{_f(pad)}" y="13" font-size="11" '
                     f'font-family="monospace" fill="#111111">{spec.title}</text>')
    for r, row in enumerate(spec.rows):
        for col, panel in enumerate(row):
            x0 = pad + col * (side + pad)
            y0 = top + r * (side + pad)
            if isinstance(panel, ImagePanel):
                parts.extend(_render_image_panel(panel, x0, y0, side))
            else:
                parts.extend(_render_point_panel(panel, x0, y0, side,
                                                 spec.marker))
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(parts) + "\n")


def training_curve_svg(epochs: list, values: list, label: str, path) -> None:
    """Single-series line chart used by the plot command for loss curves."""
    if not epochs:
        raise ValueError("no data to plot")
    w, h, pad = 420.0, 240.0, 34.0
    xs = np.asarray(epochs, dtype=np.float64)
    ys = np.asarray(values, dtype=np.float64)
    x_span = max(xs.max() - xs.min(), 1e-9)
    y_span = max(ys.max() - ys.min(), 1e-12)
    px = pad + (xs - xs.min()) / x_span * (w - 2 * pad)
    py = h - pad - (ys - ys.min()) / y_span * (h - 2 * pad)
    pts = " ".join(f"{_f(a)},{_f(b)}" for a, b in zip(px, py))
    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_f(w)}" '
        f'height="{_f(h)}" viewBox="0 0 {_f(w)} {_f(h)}">',
        f'<rect width="{_f(w)}" height="{_f(h)}" fill="#ffffff"/>',
        f'<polyline points="{pts}" fill="none" stroke="#1f6fb2" '
        'stroke-width="1.5"/>',
        f'<text x="{_f(pad)}" y="16" font-size="11" font-family="monospace" '
        f'fill="#111111">{label}</text>',
        f'<text x="{_f(pad)}" y="{_f(h - 8)}" font-size="9" '
        f'font-family="monospace" fill="#555555">epoch {_f(xs.min())} to '
        f'{_f(xs.max())}, value {ys.min():.4g} to {ys.max():.4g}</text>',
        "</svg>",
    ]
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(parts) + "\n")
