"""Datasets: MNIST digits as 2-D point sets, and synthetic detection scenes.

Set-MNIST follows the usual recipe: binarise each image at the global mean of
the training pixels and take the (x, y) coordinates of the surviving pixels,
scaled to the unit square. Cardinality therefore varies per digit, which is
exactly what makes the padding behaviour of set losses observable.

The detection data is fully synthetic so no external files are needed:
simple shapes on a textured background, each labelled by its normalised
(cx, cy, w, h) box. Scenes are generated deterministically from a seed.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import DATA_MAGIC, load_arrays, save_arrays
from .diffcore import make_rng

IDX_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def resolve_data_dir(explicit=None) -> Path:
    """Data directory: explicit argument, then SETFORGE_DATA_DIR, then the
    repository-level ./data next to the installed package, then ./data."""
    if explicit:
        return Path(explicit)
    env = os.environ.get("SETFORGE_DATA_DIR")
    if env:
        return Path(env)
    repo = Path(__file__).resolve().parents[2] / "data"
    if repo.is_dir():
        return repo
    return Path("data")


def load_idx(path) -> np.ndarray:
    """Read an IDX file (optionally gzipped) into a uint8/int array."""
    path = Path(path)
    if not path.exists() and path.with_suffix(path.suffix + ".gz").exists():
        path = path.with_suffix(path.suffix + ".gz")
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        magic = struct.unpack(">I", f.read(4))[0]
        dtype_code = (magic >> 8) & 0xFF
        ndim = magic & 0xFF
        if dtype_code != 0x08:
            raise ValueError(f"{path}: unsupported IDX dtype 0x{dtype_code:02x}")
        shape = struct.unpack(f">{ndim}I", f.read(4 * ndim))
        data = np.frombuffer(f.read(), dtype=np.uint8)
    expected = int(np.prod(shape))
    if data.size != expected:
        raise ValueError(f"{path}: expected {expected} bytes, got {data.size}")
    return data.reshape(shape)


def image_to_points(image: np.ndarray, threshold: float) -> np.ndarray:
    """Coordinates of above-threshold pixels, scaled to [0, 1]^2.

    x runs along columns, y along rows; a 28x28 grid maps to steps of 1/27.
    """
    rows, cols = np.nonzero(image > threshold)
    side = image.shape[0] - 1
    pts = np.stack([cols / side, rows / side], axis=1)
    return pts.astype(np.float64)


@dataclass
class SetDataset:
    """A list of variable-size point sets with optional per-set extras."""

    name: str
    points: list
    labels: np.ndarray
    n_max: int
    dim: int
    images: np.ndarray | None = None  # uint8, converted per batch

    def __len__(self):
        return len(self.points)

    @property
    def sizes(self) -> np.ndarray:
        return np.array([len(p) for p in self.points], dtype=np.int64)


def subset(dataset: SetDataset, count: int) -> SetDataset:
    """First ``count`` examples in dataset order. n_max is kept from the
    parent so decoders sized against the full split stay compatible."""
    if count <= 0 or count >= len(dataset):
        return dataset
    return SetDataset(dataset.name, dataset.points[:count],
                      dataset.labels[:count], n_max=dataset.n_max,
                      dim=dataset.dim,
                      images=None if dataset.images is None
                      else dataset.images[:count])


def mnist_threshold(train_images: np.ndarray) -> float:
    return float(train_images.mean())


def load_set_mnist(split: str, data_dir=None, limit: int | None = None,
                   threshold: float | None = None) -> SetDataset:
    """Set-MNIST: one point set per digit image.

    The binarisation threshold always comes from the training images so that
    train and test use the same rule. Empty sets cannot occur in practice;
    if one did (an all-dark image) it would be rejected here.
    """
    root = resolve_data_dir(data_dir) / "mnist"
    img_name, lab_name = IDX_FILES[split]
    images = load_idx(root / img_name)
    labels = load_idx(root / lab_name).astype(np.int64)
    if threshold is None:
        if split == "train":
            threshold = mnist_threshold(images)
        else:
            threshold = mnist_threshold(load_idx(root / IDX_FILES["train"][0]))
    if limit is not None:
        images = images[:limit]
        labels = labels[:limit]
    points = [image_to_points(img, threshold) for img in images]
    sizes = np.array([len(p) for p in points])
    if np.any(sizes == 0):
        raise ValueError("degenerate all-dark image produced an empty set")
    return SetDataset(name=f"set-mnist-{split}", points=points, labels=labels,
                      n_max=int(sizes.max()), dim=2)


# ---------------------------------------------------------------------------
# synthetic detection


MAX_OBJECTS = 10
SCENE_SIDE = 64


def gen_detection_scene(seed: int, scene_id: int):
    """One deterministic scene: uint8 image (64, 64, 3) plus (k, 4) boxes.

    Objects are filled rectangles or ellipses with distinct centres (minimum
    separation 0.08, rejection-sampled) on a noisy dark background. Boxes are
    (cx, cy, w, h) in canvas-normalised coordinates.
    """
    rng = make_rng(seed, 9001, scene_id)
    count = int(rng.integers(1, MAX_OBJECTS + 1))
    centres = []
    while len(centres) < count:
        c = rng.uniform(0.12, 0.88, size=2)
        if all(np.hypot(*(c - p)) >= 0.08 for p in centres):
            centres.append(c)

    img = rng.uniform(0.05, 0.15, size=(SCENE_SIDE, SCENE_SIDE, 3))
    boxes = np.zeros((count, 4))
    yy, xx = np.mgrid[0:SCENE_SIDE, 0:SCENE_SIDE]
    xn = (xx + 0.5) / SCENE_SIDE
    yn = (yy + 0.5) / SCENE_SIDE
    for i, (cx, cy) in enumerate(centres):
        w, h = rng.uniform(0.12, 0.3, size=2)
        colour = rng.uniform(0.35, 1.0, size=3)
        if rng.uniform() < 0.5:
            inside = (np.abs(xn - cx) <= w / 2) & (np.abs(yn - cy) <= h / 2)
        else:
            inside = ((xn - cx) / (w / 2)) ** 2 + ((yn - cy) / (h / 2)) ** 2 <= 1.0
        img[inside] = colour
        boxes[i] = (cx, cy, w, h)
    return (img * 255).astype(np.uint8), boxes


def load_detection(split: str, n_scenes: int, data_seed: int = 0) -> SetDataset:
    """Build (or regenerate) a deterministic scene collection.

    Train and test draw from disjoint scene-id ranges for a given seed.
    """
    offset = {"train": 0, "test": 1 << 20, "val": 1 << 21}[split]
    images = np.zeros((n_scenes, SCENE_SIDE, SCENE_SIDE, 3), dtype=np.uint8)
    points = []
    for i in range(n_scenes):
        img, boxes = gen_detection_scene(data_seed, offset + i)
        images[i] = img
        points.append(boxes)
    labels = np.array([len(p) for p in points], dtype=np.int64)
    return SetDataset(name=f"detect-{split}", points=points, labels=labels,
                      n_max=MAX_OBJECTS, dim=4, images=images)


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    points: np.ndarray          # (B, N, d) zero-padded
    mask: np.ndarray            # (B, N)
    sizes: np.ndarray           # (B,)
    images: np.ndarray | None   # (B, H, W, 3) float64 in [0, 1], if any
    indices: np.ndarray


def make_batches(dataset: SetDataset, batch_size: int,
                 rng: np.random.Generator | None = None,
                 pad_to: int | None = None, bucket: bool = False):
    """Yield shuffled fixed-size batches; the trailing partial batch is kept.

    Sets are zero-padded to the longest set in each batch (or ``pad_to``),
    with masks marking real rows. With ``bucket`` the examples are grouped by
    cardinality (random tie-break) and the batch order shuffled, so padding
    within a batch stays small; pointless when ``pad_to`` forces full width.
    """
    order = np.arange(len(dataset))
    if rng is not None:
        order = rng.permutation(order)
    if bucket and pad_to is None:
        sizes_all = np.array([len(dataset.points[i]) for i in order])
        order = order[np.argsort(sizes_all, kind="stable")]
    batches = [order[s:s + batch_size]
               for s in range(0, len(order), batch_size)]
    if bucket and pad_to is None and rng is not None:
        rng.shuffle(batches)
    for idx in batches:
        sets = [dataset.points[i] for i in idx]
        sizes = np.array([len(s) for s in sets], dtype=np.int64)
        n = int(sizes.max()) if pad_to is None else pad_to
        pts = np.zeros((len(idx), n, dataset.dim))
        mask = np.zeros((len(idx), n))
        for j, s in enumerate(sets):
            pts[j, :len(s)] = s
            mask[j, :len(s)] = 1.0
        images = None
        if dataset.images is not None:
            images = dataset.images[idx].astype(np.float64) / 255.0
        yield Batch(pts, mask, sizes, images, idx)


# ---------------------------------------------------------------------------
# cache container


def save_dataset_cache(path, dataset: SetDataset) -> None:
    """Serialise a SetDataset into the flat array container."""
    sizes = dataset.sizes
    arrays = {
        "meta": np.array([len(dataset), dataset.n_max, dataset.dim,
                          1.0 if dataset.images is not None else 0.0]),
        "sizes": sizes.astype(np.float64),
        "labels": dataset.labels.astype(np.float64),
        "points": (np.concatenate(dataset.points, axis=0)
                   if len(sizes) else np.zeros((0, dataset.dim))),
    }
    if dataset.images is not None:
        arrays["images"] = dataset.images.astype(np.float64)
    save_arrays(path, arrays, magic=DATA_MAGIC)


def load_dataset_cache(path, name: str = "cached") -> SetDataset:
    arrays = load_arrays(path, magic=DATA_MAGIC)
    n, n_max, dim, has_images = arrays["meta"]
    sizes = arrays["sizes"].astype(np.int64)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    flat = arrays["points"]
    points = [flat[offsets[i]:offsets[i + 1]] for i in range(int(n))]
    images = None
    if has_images:
        images = arrays["images"].astype(np.uint8)
    return SetDataset(name=name, points=points,
                      labels=arrays["labels"].astype(np.int64),
                      n_max=int(n_max), dim=int(dim), images=images)
