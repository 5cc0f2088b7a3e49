"""Dataset construction, batching, and the cache container."""

import numpy as np
import pytest

import setforge.data as data
from setforge.checkpoint import FormatError, load_arrays, save_arrays

rng = np.random.default_rng(33)


def test_image_to_points_known_pixels():
    img = np.zeros((28, 28), dtype=np.uint8)
    img[0, 27] = 200   # top-right corner
    img[27, 0] = 200   # bottom-left corner
    pts = data.image_to_points(img, 50.0)
    assert sorted(pts.tolist()) == [[0.0, 1.0], [1.0, 0.0]]


def test_set_mnist_loads_and_thresholds(tmp_path):
    ds = data.load_set_mnist("train", limit=200)
    assert len(ds) == 200
    assert ds.dim == 2
    assert all(p.shape[1] == 2 for p in ds.points)
    assert all(len(p) > 0 for p in ds.points)
    assert all(p.min() >= 0 and p.max() <= 1 for p in ds.points)
    # labels are digits
    assert set(ds.labels.tolist()) <= set(range(10))


def test_set_mnist_train_max_cardinality_hits_range():
    # this is the number that drives the padding-degeneracy story
    ds = data.load_set_mnist("train")
    assert 320 <= ds.n_max <= 360


def test_detection_scene_deterministic():
    img1, boxes1 = data.gen_detection_scene(7, 3)
    img2, boxes2 = data.gen_detection_scene(7, 3)
    assert np.array_equal(img1, img2)
    assert np.array_equal(boxes1, boxes2)
    img3, _ = data.gen_detection_scene(8, 3)
    assert not np.array_equal(img1, img3)


def test_detection_scene_properties():
    for sid in range(30):
        img, boxes = data.gen_detection_scene(0, sid)
        assert img.shape == (64, 64, 3) and img.dtype == np.uint8
        assert 1 <= len(boxes) <= data.MAX_OBJECTS
        assert np.all(boxes[:, :2] >= 0.1) and np.all(boxes[:, :2] <= 0.9)
        # centres are pairwise separated
        for i in range(len(boxes)):
            for j in range(i + 1, len(boxes)):
                gap = np.hypot(*(boxes[i, :2] - boxes[j, :2]))
                assert gap >= 0.08


def test_detection_split_disjoint_and_sized():
    tr = data.load_detection("train", 20, data_seed=1)
    te = data.load_detection("test", 20, data_seed=1)
    assert len(tr) == len(te) == 20
    assert tr.images.shape == (20, 64, 64, 3)
    assert not np.array_equal(tr.images[0], te.images[0])


def test_make_batches_covers_everything_once():
    ds = data.SetDataset("toy", [rng.normal(size=(k, 2)) for k in (3, 1, 4, 2, 5)],
                         np.arange(5), n_max=5, dim=2)
    batches = list(data.make_batches(ds, 2, rng=np.random.default_rng(0)))
    seen = np.concatenate([b.indices for b in batches])
    assert sorted(seen.tolist()) == [0, 1, 2, 3, 4]
    assert [len(b.indices) for b in batches] == [2, 2, 1]
    for b in batches:
        assert b.points.shape[1] == int(b.sizes.max())
        for row, size in enumerate(b.sizes):
            assert np.all(b.mask[row, :size] == 1)
            assert np.all(b.mask[row, size:] == 0)
            assert np.all(b.points[row, size:] == 0)


def test_subset_preserves_order_and_parent_n_max():
    ds = data.SetDataset("toy", [rng.normal(size=(k, 2)) for k in (3, 1, 4, 2, 5)],
                         np.arange(5), n_max=5, dim=2)
    sub = data.subset(ds, 3)
    assert len(sub) == 3
    assert sub.labels.tolist() == [0, 1, 2]
    assert [len(p) for p in sub.points] == [3, 1, 4]
    # parent n_max is kept so decoders sized on the full split still fit
    assert sub.n_max == 5
    # degenerate counts hand back the original dataset untouched
    assert data.subset(ds, 0) is ds
    assert data.subset(ds, 5) is ds
    assert data.subset(ds, 99) is ds


def test_subset_slices_images_too():
    ds = data.load_detection("train", 6, data_seed=0)
    sub = data.subset(ds, 2)
    assert sub.images.shape[0] == 2
    assert np.array_equal(sub.images[1], ds.images[1])


def test_make_batches_pad_to_and_images():
    ds = data.load_detection("train", 5, data_seed=0)
    b = next(data.make_batches(ds, 5, pad_to=10))
    assert b.points.shape == (5, 10, 4)
    assert b.images.shape == (5, 64, 64, 3)
    assert b.images.dtype == np.float64
    assert b.images.max() <= 1.0


def test_dataset_cache_roundtrip(tmp_path):
    ds = data.load_detection("train", 4, data_seed=2)
    p = tmp_path / "detect.sfd"
    data.save_dataset_cache(p, ds)
    back = data.load_dataset_cache(p)
    assert len(back) == 4
    assert back.n_max == ds.n_max and back.dim == ds.dim
    for a, b in zip(ds.points, back.points):
        assert np.allclose(a, b)
    assert np.array_equal(ds.images, back.images)

    # wrong magic must be rejected
    with pytest.raises(FormatError):
        load_arrays(p)  # default expects the checkpoint magic


def test_container_rejects_truncation(tmp_path):
    p = tmp_path / "x.ckpt"
    save_arrays(p, {"a": np.arange(8.0)})
    blob = p.read_bytes()
    p.write_bytes(blob[:-8])
    with pytest.raises(FormatError):
        load_arrays(p)


def test_container_roundtrip_scalars_and_order(tmp_path):
    p = tmp_path / "y.ckpt"
    arrays = {"z.scalar": np.float64(3.5), "a.mat": rng.normal(size=(3, 2))}
    save_arrays(p, arrays)
    back = load_arrays(p)
    assert list(back) == ["z.scalar", "a.mat"]  # insertion order kept
    assert back["z.scalar"].shape == ()
    assert np.allclose(back["a.mat"], arrays["a.mat"])
    head = p.read_bytes()[:15].decode()
    assert head == "SETFORGE-CKPT-1"


def test_resolve_data_dir_env(monkeypatch, tmp_path):
    monkeypatch.setenv("SETFORGE_DATA_DIR", str(tmp_path))
    assert data.resolve_data_dir() == tmp_path
    monkeypatch.delenv("SETFORGE_DATA_DIR")
    assert data.resolve_data_dir("/explicit") == data.Path("/explicit")
