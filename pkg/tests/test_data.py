import gzip
import struct
from collections import Counter

import numpy as np
import pytest

from agpmil import data


def write_idx(path, array, magic=None, gz=False):
    array = np.asarray(array, dtype=np.uint8)
    magic = (0x0800 | array.ndim) if magic is None else magic
    raw = struct.pack(">I", magic) + b"".join(struct.pack(">I", n) for n in array.shape) + array.tobytes()
    if gz:
        raw = gzip.compress(raw)
    path.write_bytes(raw)
    return path


def write_cifar(path, labels, rng):
    recs = [bytes([int(y)]) + rng.integers(0, 256, 3072, dtype=np.uint8).tobytes() for y in labels]
    path.write_bytes(b"".join(recs))
    return path


@pytest.fixture(scope="module")
def mnist(mnist_dir):
    return data.load_mnist(mnist_dir)


@pytest.fixture(scope="module")
def cifar(cifar_dir):
    return data.load_cifar(cifar_dir)


# --- IDX ----------------------------------------------------------------------
def test_idx_round_trip(tmp_path, rng):
    imgs = rng.integers(0, 256, size=(5, 4, 3))
    labels = np.array([1, 0, 9, 3, 3])
    s = data.parse_idx(write_idx(tmp_path / "i", imgs), write_idx(tmp_path / "l", labels))
    assert s.images.shape == (5, 1, 4, 3)
    np.testing.assert_array_equal(s.images[:, 0], imgs)
    np.testing.assert_array_equal(s.labels, labels)


def test_idx_gzip_transparent(tmp_path, rng):
    imgs = rng.integers(0, 256, size=(2, 3, 3))
    write_idx(tmp_path / "i.gz", imgs, gz=True)
    np.testing.assert_array_equal(data.read_idx(tmp_path / "i"), imgs)  # falls back to .gz


def test_idx_truncated(tmp_path, rng):
    p = write_idx(tmp_path / "i", rng.integers(0, 256, size=(3, 4, 4)))
    p.write_bytes(p.read_bytes()[:-5])
    with pytest.raises(data.DataFormatError, match="truncated"):
        data.read_idx(p)
    p.write_bytes(b"\x00\x00")
    with pytest.raises(data.DataFormatError, match="truncated"):
        data.read_idx(p)


def test_idx_bad_magic(tmp_path):
    p = write_idx(tmp_path / "i", np.zeros((2, 2, 2)), magic=0x00000D03)
    with pytest.raises(data.DataFormatError, match="magic"):
        data.read_idx(p)


def test_idx_count_mismatch(tmp_path):
    with pytest.raises(data.DataFormatError, match="mismatch"):
        data.parse_idx(write_idx(tmp_path / "i", np.zeros((3, 2, 2))), write_idx(tmp_path / "l", np.zeros(2)))


def test_mnist_real_files(mnist, mnist_dir):
    assert mnist["train"].images.shape == (60000, 1, 28, 28)
    assert mnist["test"].images.shape == (10000, 1, 28, 28)
    # independent minimal decoder: label files hold one byte per label after an 8-byte header
    raw = (mnist_dir / "train-labels-idx1-ubyte").read_bytes()
    assert raw[8] == 5 == mnist["train"].labels[0]
    assert Counter(raw[8:]) == Counter(mnist["train"].labels.tolist())


# --- CIFAR ----------------------------------------------------------------------
def test_cifar_synthetic_round_trip(tmp_path, rng):
    p = write_cifar(tmp_path / "b.bin", [3, 0, 9], rng)
    s = data.parse_cifar(p)
    assert s.images.shape == (3, 3, 32, 32)
    raw = p.read_bytes()
    np.testing.assert_array_equal(s.images[1, 2].ravel(), np.frombuffer(raw[3073 + 1 + 2048:3073 * 2], np.uint8))
    np.testing.assert_array_equal(s.labels, [3, 0, 9])


def test_cifar_record_length(tmp_path, rng):
    p = write_cifar(tmp_path / "b.bin", [1, 2], rng)
    p.write_bytes(p.read_bytes()[:-1])
    with pytest.raises(data.DataFormatError, match="3073"):
        data.parse_cifar(p)


def test_cifar_bad_label(tmp_path, rng):
    with pytest.raises(data.DataFormatError, match="label"):
        data.parse_cifar(write_cifar(tmp_path / "b.bin", [12], rng))


def test_cifar_batch_histogram_independent(cifar_dir):
    raw = (cifar_dir / "data_batch_1.bin").read_bytes()
    oracle = Counter(raw[0::3073])
    s = data.parse_cifar(cifar_dir / "data_batch_1.bin")
    assert len(s) == 10000
    assert Counter(s.labels.tolist()) == oracle


# --- MNIST bags -----------------------------------------------------------------
def test_mnist_bag_counts(mnist):
    tr, te = data.make_mnist_bags(mnist["train"], mnist["test"], 1)
    assert (len(tr), len(te)) == (6667, 1112)
    assert len(tr.bags[-1]) == 6 and len(te.bags[-1]) == 1
    assert all(len(b) == 9 for b in tr.bags[:-1])


def test_mnist_bags_partition_sources(mnist):
    tr, te = data.make_mnist_bags(mnist["train"], mnist["test"], 2)
    for ds, n in ((tr, 60000), (te, 10000)):
        idx = np.concatenate([b.indices for b in ds])
        assert len(idx) == n and len(np.unique(idx)) == n
    assert all(b.source is mnist["train"] for b in tr) and all(b.source is mnist["test"] for b in te)


def test_mnist_bag_labels(mnist):
    tr, te = data.make_mnist_bags(mnist["train"], mnist["test"], 3)
    for ds in (tr, te):
        for b in ds:
            has_zero = bool((b.source.labels[b.indices] == 0).any())
            assert b.label == int(has_zero)


def test_mnist_positive_fraction(mnist):
    p0 = float((mnist["train"].labels == 0).mean())
    expected = 1 - (1 - p0) ** 9
    for seed in (1, 2, 3):
        tr, _ = data.make_mnist_bags(mnist["train"], mnist["test"], seed)
        frac = np.mean([b.label for b in tr])
        assert abs(frac - expected) < 0.02


def test_pixels_scaled(mnist):
    tr, _ = data.make_mnist_bags(mnist["train"], mnist["test"], 1)
    px = tr.bags[0].pixels
    assert px.dtype == np.float64 and px.min() >= 0 and px.max() <= 1
    np.testing.assert_array_equal(px, mnist["train"].images[tr.bags[0].indices] / 255.0)


def test_manifest_determinism(mnist, tmp_path):
    a = data.to_manifest(data.make_mnist_bags(mnist["train"], mnist["test"], 1))
    b = data.to_manifest(data.make_mnist_bags(mnist["train"], mnist["test"], 1))
    c = data.to_manifest(data.make_mnist_bags(mnist["train"], mnist["test"], 2))
    assert data.manifest_bytes(a) == data.manifest_bytes(b)
    assert data.manifest_digest(a) != data.manifest_digest(c)
    assert [len(s["bags"]) for s in a["splits"].values()] == [len(s["bags"]) for s in c["splits"].values()]
    path = tmp_path / "m.json"
    digest = data.write_manifest(a, path)
    assert digest == data.manifest_digest(data.read_manifest(path))


def test_manifest_reconstruction(mnist):
    tr, te = data.make_mnist_bags(mnist["train"], mnist["test"], 5)
    back = data.datasets_from_manifest(data.to_manifest([tr, te]), mnist)
    for orig in (tr, te):
        rebuilt = back[orig.split]
        assert [b.bag_id for b in rebuilt] == [b.bag_id for b in orig]
        for x, y in zip(orig.bags[:50], rebuilt.bags[:50]):
            np.testing.assert_array_equal(x.indices, y.indices)
            assert x.label == y.label


def test_manifest_digest_mismatch(mnist):
    doc = data.to_manifest(data.make_mnist_bags(mnist["train"], mnist["test"], 1))
    name = next(iter(doc["splits"]["train"]["provenance"]))
    doc["splits"]["train"]["provenance"][name] = "0" * 64
    with pytest.raises(data.DataFormatError, match="digest"):
        data.datasets_from_manifest(doc, mnist)


def test_bag_label_check_catches_corruption(mnist):
    tr, te = data.make_mnist_bags(mnist["train"], mnist["test"], 1)
    te.bags[0].label = 1 - te.bags[0].label
    with pytest.raises(AssertionError):
        data.check_bag_labels(te)


# --- CIFAR bags -----------------------------------------------------------------
def test_cifar_bag_counts(cifar):
    sets = data.make_cifar_bags(cifar["train"], cifar["val"], cifar["test"], 1)
    assert [len(s) for s in sets] == [4443, 1110, 1110]
    assert [s.class_counts() for s in sets] == [[1481] * 3, [370] * 3, [370] * 3]


def test_cifar_bag_invariants(cifar):
    sets = data.make_cifar_bags(cifar["train"], cifar["val"], cifar["test"], 2)
    for ds in sets:
        for b in ds:
            y = b.source.labels[b.indices]
            assert len(b) == 9 and len(np.unique(b.indices)) == 9
            planes, cars = int((y == 0).sum()), int((y == 1).sum())
            if b.label == 0:
                assert planes == cars == 0
            elif b.label == 1:
                assert planes >= 1 and cars == 0
            else:
                assert cars >= 1 and planes == 0
    # splits draw from disjoint source files
    assert sets[0].bags[0].source is cifar["train"] and sets[1].bags[0].source is cifar["val"]


def test_cifar_positive_fraction(cifar):
    for seed in range(10):
        tr, _, _ = data.make_cifar_bags(cifar["train"], cifar["val"], cifar["test"], seed)
        inst = np.concatenate([b.instance_labels for b in tr])
        for cls in (0, 1):
            assert abs((inst == cls).mean() - 0.0567) < 0.01, (seed, cls)


def test_cifar_label_helper():
    assert data.cifar_bag_label([5, 6, 7]) == 0
    assert data.cifar_bag_label([0, 6, 7]) == 1
    assert data.cifar_bag_label([1, 6, 1]) == 2
    with pytest.raises(ValueError):
        data.cifar_bag_label([0, 1])


def test_cifar_too_few_sources(rng):
    s = data.ImageSet(np.zeros((5, 3, 32, 32), np.uint8), np.array([0, 1, 2, 3, 4], np.uint8))
    with pytest.raises(data.DataFormatError):
        data.make_cifar_bags(s, s, s, 1, per_class={"train": 1, "val": 1, "test": 1})
