"""Dataset ingestion and synthesis tests.

IDX fixtures are crafted byte-by-byte with struct so the parser is
checked against the container format itself, not against its own
output.
"""

import math
import struct

import numpy as np
import pytest

import liegconv.data as D
import liegconv.model as M


def write_idx_images(path, arr):
    arr = np.asarray(arr, dtype=np.uint8)
    path.write_bytes(struct.pack(">IIII", 0x00000803, *arr.shape) + arr.tobytes())


def write_idx_labels(path, arr):
    arr = np.asarray(arr, dtype=np.uint8)
    path.write_bytes(struct.pack(">II", 0x00000801, arr.shape[0]) + arr.tobytes())


# ---------------------------------------------------------------------------
# IDX parsing


def test_idx_images_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    arr = rng.integers(0, 256, size=(4, 28, 28), dtype=np.uint8)
    path = tmp_path / "imgs"
    write_idx_images(path, arr)
    out = D.load_idx(path)
    assert out.shape == (4, 28, 28)
    assert out.dtype == np.uint8
    assert np.array_equal(out, arr)


def test_idx_labels_roundtrip(tmp_path):
    labels = np.arange(10, dtype=np.uint8)
    path = tmp_path / "labels"
    write_idx_labels(path, labels)
    out = D.load_idx(path)
    assert out.shape == (10,)
    assert np.array_equal(out, labels)
    assert out.min() >= 0 and out.max() <= 9


def test_idx_bad_magic(tmp_path):
    path = tmp_path / "bad"
    path.write_bytes(struct.pack(">IIII", 0x00000805, 1, 2, 2) + bytes(4))
    with pytest.raises(D.IdxFormatError, match=r"magic 0x00000805 at byte 0"):
        D.load_idx(path)


def test_idx_truncated_payload(tmp_path):
    arr = np.zeros((2, 3, 3), dtype=np.uint8)
    path = tmp_path / "trunc"
    write_idx_images(path, arr)
    blob = path.read_bytes()
    path.write_bytes(blob[:-5])
    with pytest.raises(D.IdxFormatError, match=rf"byte {len(blob) - 5}"):
        D.load_idx(path)


def test_idx_truncated_header(tmp_path):
    path = tmp_path / "hdr"
    path.write_bytes(struct.pack(">I", 0x00000803) + b"\x00\x00")
    with pytest.raises(D.IdxFormatError, match=r"byte 6"):
        D.load_idx(path)


def test_idx_empty_file(tmp_path):
    path = tmp_path / "empty"
    path.write_bytes(b"")
    with pytest.raises(D.IdxFormatError, match=r"byte 0"):
        D.load_idx(path)


def test_load_mnist_directory(tmp_path):
    rng = np.random.default_rng(1)
    shapes = {"train": 6, "test": 3}
    for split, n in shapes.items():
        prefix = "train" if split == "train" else "t10k"
        write_idx_images(
            tmp_path / f"{prefix}-images-idx3-ubyte",
            rng.integers(0, 256, size=(n, 28, 28), dtype=np.uint8),
        )
        write_idx_labels(
            tmp_path / f"{prefix}-labels-idx1-ubyte",
            rng.integers(0, 10, size=n, dtype=np.uint8),
        )
    out = D.load_mnist(tmp_path)
    assert out["train_images"].shape == (6, 28, 28)
    assert out["test_images"].shape == (3, 28, 28)
    assert out["train_labels"].shape == (6,)
    assert out["test_labels"].shape == (3,)


# ---------------------------------------------------------------------------
# resampling


def digits(n, seed=0):
    return D.synth_digits(n, seed)


def test_rotation_zero_is_bit_exact():
    imgs = digits(6).images
    out = D.rotate_images(imgs, 0.0)
    assert out.dtype == imgs.dtype
    assert np.array_equal(out, imgs)


def test_scale_one_is_bit_exact():
    imgs = digits(6).images
    assert np.array_equal(D.scale_images(imgs, 1.0), imgs)


def test_rotate_pi_twice_close_to_identity():
    imgs = digits(8).images
    twice = D.rotate_images(D.rotate_images(imgs, math.pi), math.pi)
    assert np.max(np.abs(twice - imgs)) < 0.1


def test_rotation_preserves_pixel_range():
    imgs = digits(8).images
    out = D.rotate_images(imgs, np.linspace(0.1, 5.9, 8))
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_scale_shrinks_toward_center_with_zero_padding():
    ones = np.ones((1, 1, 28, 28), dtype=np.float32)
    out = D.scale_images(ones, 0.5)[0, 0]
    assert out[0, :].max() == 0.0 and out[:, 0].max() == 0.0
    assert out[13:15, 13:15].min() > 0.99
    # pixel mass shrinks by roughly the area factor
    assert out.sum() == pytest.approx(0.25 * 28 * 28, rel=0.15)


def test_scale_rejects_nonpositive():
    with pytest.raises(ValueError, match="positive"):
        D.scale_images(np.ones((1, 1, 4, 4)), 0.0)


def test_rotation_moves_offcenter_mass():
    img = np.zeros((1, 1, 28, 28), dtype=np.float32)
    img[0, 0, 13:15, 20:24] = 1.0  # patch to the right of center
    out = D.rotate_images(img, math.pi / 2)[0, 0]
    top = out[:14].sum()
    bottom = out[14:].sum()
    assert top + bottom == pytest.approx(img.sum(), rel=0.1)
    assert max(top, bottom) > 5 * min(top, bottom)


def test_make_rotated_provenance_and_determinism():
    base = digits(10)
    a = D.make_rotated(base, seed=3)
    b = D.make_rotated(base, seed=3)
    c = D.make_rotated(base, seed=4)
    assert np.array_equal(a.images, b.images)
    assert not np.array_equal(a.images, c.images)
    assert np.array_equal(a.labels, base.labels)
    assert a.provenance["transform"] == "rotated"
    assert a.provenance["seed"] == 3
    assert a.provenance["angle_range"] == [0.0, 2 * math.pi]


def test_make_scaled_and_rot_scaled_ranges():
    base = digits(10)
    s = D.make_scaled(base, seed=1)
    rs = D.make_rot_scaled(base, seed=1)
    assert s.provenance["scale_range"] == [0.3, 1.0]
    assert rs.provenance["angle_range"] == [0.0, 2 * math.pi]
    assert rs.provenance["scale_range"] == [0.3, 1.0]
    for ds in (s, rs):
        assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
        assert ds.images.shape == base.images.shape


def test_make_transform_accepts_tuple():
    imgs = np.zeros((3, 28, 28), dtype=np.float32)
    out = D.make_rotated((imgs, np.array([1, 2, 3])), seed=0)
    assert isinstance(out, D.Dataset)
    assert out.images.shape == (3, 1, 28, 28)
    assert list(out.labels) == [1, 2, 3]


# ---------------------------------------------------------------------------
# splits


def test_split_paper_sizes_and_disjointness():
    n = 62001
    images = (np.arange(n, dtype=np.float64) / n).reshape(-1, 1, 1, 1)
    images = np.broadcast_to(images, (n, 1, 2, 2)).astype(np.float32)
    labels = np.arange(n) % 10
    train, val, test = D.split_paper(images, labels, seed=0)
    assert (len(train), len(val), len(test)) == (10000, 2000, 50000)
    assert (train.split, val.split, test.split) == ("train", "val", "test")
    ids = [set(np.round(ds.images[:, 0, 0, 0] * n).astype(int)) for ds in (train, val, test)]
    assert len(ids[0] | ids[1] | ids[2]) == 62000
    assert not (ids[0] & ids[1]) and not (ids[0] & ids[2]) and not (ids[1] & ids[2])
    assert not train.provenance["scaled_down"]


def test_split_paper_deterministic():
    images = np.zeros((70000, 1, 2, 2), dtype=np.float32)
    labels = np.arange(70000)
    a = D.split_paper(images, labels, seed=5)
    b = D.split_paper(images, labels, seed=5)
    c = D.split_paper(images, labels, seed=6)
    assert np.array_equal(a[0].labels, b[0].labels)
    assert not np.array_equal(a[0].labels, c[0].labels)


def test_split_paper_insufficient_samples():
    with pytest.raises(ValueError, match=r"62000.*got 100"):
        D.split_paper(np.zeros((100, 1, 2, 2)), np.zeros(100), seed=0)


def test_split_scaled_down_flagged():
    images = np.zeros((20, 1, 2, 2), dtype=np.float32)
    train, val, test = D.split_paper(images, np.arange(20), seed=0, sizes=(5, 3, 8))
    assert (len(train), len(val), len(test)) == (5, 3, 8)
    assert train.provenance["scaled_down"]


# ---------------------------------------------------------------------------
# synthetic corpora


def test_oriented_bars_empty():
    ds = D.synth_oriented_bars(0, seed=0)
    assert ds.images.shape == (0, 1, 28, 28)
    assert len(ds.labels) == 0


def test_oriented_bars_balanced_and_bounded():
    ds = D.synth_oriented_bars(10, seed=0)
    counts = np.bincount(ds.labels, minlength=4)
    assert counts.max() - counts.min() <= 1
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
    assert set(ds.labels.tolist()) == {0, 1, 2, 3}


def test_oriented_bars_classes_distinct():
    ds = D.synth_oriented_bars(4, seed=0)
    for i in range(4):
        for j in range(i + 1, 4):
            assert np.abs(ds.images[i] - ds.images[j]).max() > 0.3


def test_oriented_bars_deterministic():
    a = D.synth_oriented_bars(12, seed=7)
    b = D.synth_oriented_bars(12, seed=7)
    assert np.array_equal(a.images, b.images)


def test_quarter_rotation_invariant_model_learns_bars():
    # no two bar orientations differ by a quarter turn, so a model whose
    # features are pooled over four rotations can still reach 100%
    train = D.synth_oriented_bars(24, seed=0)
    cfg = M.GCNNConfig(
        group_tag="SE2",
        factorization="Separable",
        n_rotations=4,
        stencil=3,
        lift_channels=3,
        block1_channels=3,
        block2_channels=4,
        siren_hidden=(8,),
        head_hidden=8,
        n_classes=4,
        dtype="float64",
        seed=3,
    )
    model = M.build_model(cfg)
    tc = M.TrainConfig(epochs=60, batch_size=24, lr=1e-2, weight_decay=0.0, seed=0)
    M.train(model, tc, train)
    assert M.evaluate(model, train) == 1.0


def test_synth_digits_shapes_and_determinism():
    a = D.synth_digits(20, seed=2)
    b = D.synth_digits(20, seed=2)
    assert a.images.shape == (20, 1, 28, 28)
    assert np.array_equal(a.images, b.images)
    assert a.images.min() >= 0.0 and a.images.max() <= 1.0
    assert np.array_equal(a.labels, np.arange(20) % 10)


def test_synth_digits_classes_stable_across_seeds():
    # prototypes are fixed; only jitter depends on the seed, so the
    # per-class mean images (jitter averaged out) stay aligned
    a = D.synth_digits(100, seed=0)
    b = D.synth_digits(100, seed=99)
    for cls in range(10):
        x = a.images[a.labels == cls, 0].mean(axis=0).ravel()
        y = b.images[b.labels == cls, 0].mean(axis=0).ravel()
        cos = float(x @ y / (np.linalg.norm(x) * np.linalg.norm(y) + 1e-12))
        assert cos > 0.7, f"class {cls} drifted across seeds (cos={cos:.3f})"


def test_digit_prototypes_distinct():
    protos = D.digit_prototypes()
    assert protos.shape == (10, 28, 28)
    for i in range(10):
        for j in range(i + 1, 10):
            x, y = protos[i].ravel(), protos[j].ravel()
            cos = float(x @ y / (np.linalg.norm(x) * np.linalg.norm(y)))
            assert cos < 0.95, f"prototypes {i} and {j} nearly identical"


def test_dataset_validation():
    with pytest.raises(ValueError, match=r"\(N, 1, H, W\)"):
        D.Dataset(np.zeros((3, 2, 4, 4)), np.zeros(3))
    with pytest.raises(ValueError, match="labels"):
        D.Dataset(np.zeros((3, 1, 4, 4)), np.zeros(2))
