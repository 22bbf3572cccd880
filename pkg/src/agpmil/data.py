"""MNIST / CIFAR-10 readers and MIL bag synthesis.

Bags never copy pixels: each one keeps indices into a shared ``ImageSet`` and
converts to floats in [0, 1] on demand.
"""
from __future__ import annotations

import gzip
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .rng import stream

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32
BAG_SIZE = 9

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_SPLIT_FILES = {
    "train": ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin"],
    "val": ["data_batch_5.bin"],
    "test": ["test_batch.bin"],
}
CIFAR_CLASSES = ["airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck"]
CIFAR_BAG_CLASSES = ["negative", "airplane", "car"]
CIFAR_BAGS_PER_CLASS = {"train": 1481, "val": 370, "test": 370}
MNIST_BAG_CLASSES = ["negative", "positive"]


class DataFormatError(ValueError):
    pass


@dataclass
class ImageSet:
    images: np.ndarray  # uint8, (n, C, H, W)
    labels: np.ndarray  # uint8, (n,)
    digests: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.labels)


@dataclass
class Instance:
    pixels: np.ndarray
    true_label: int


@dataclass
class Bag:
    bag_id: int
    label: int
    indices: np.ndarray
    instance_labels: np.ndarray
    source: Optional[ImageSet] = field(default=None, repr=False)

    def __len__(self):
        return len(self.indices)

    @property
    def pixels(self) -> np.ndarray:
        if self.source is None:
            raise ValueError(f"bag {self.bag_id} has no image source attached")
        return self.source.images[self.indices].astype(np.float64) / 255.0

    @property
    def instances(self) -> list:
        px = self.pixels
        return [Instance(px[i], int(y)) for i, y in enumerate(self.instance_labels)]


@dataclass
class BagDataset:
    bags: list
    split: str
    seed: int
    task: str
    class_names: list
    provenance: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.bags)

    def __iter__(self):
        return iter(self.bags)

    def class_counts(self) -> list:
        counts = np.bincount([b.label for b in self.bags], minlength=len(self.class_names))
        return [int(c) for c in counts]


# --------------------------------------------------------------------- readers
def _read_bytes(path) -> bytes:
    path = Path(path)
    if not path.exists() and Path(str(path) + ".gz").exists():
        path = Path(str(path) + ".gz")
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def file_digest(path) -> str:
    return hashlib.sha256(_read_bytes(path)).hexdigest()


def read_idx(path) -> np.ndarray:
    """Decode one IDX file (unsigned-byte images or labels)."""
    raw = _read_bytes(path)
    if len(raw) < 8:
        raise DataFormatError(f"{path}: truncated IDX header")
    magic = int.from_bytes(raw[:4], "big")
    if magic not in (IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC):
        raise DataFormatError(f"{path}: bad IDX magic 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError(f"{path}: truncated IDX header")
    dims = [int.from_bytes(raw[4 + 4 * i:8 + 4 * i], "big") for i in range(ndim)]
    expected = int(np.prod(dims))
    if len(raw) - header < expected:
        raise DataFormatError(f"{path}: truncated IDX payload, expected {expected} bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=expected, offset=header).reshape(dims)


def parse_idx(images_path, labels_path) -> ImageSet:
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3 or labels.ndim != 1:
        raise DataFormatError(f"{images_path}/{labels_path}: expected 3-d images and 1-d labels")
    if len(images) != len(labels):
        raise DataFormatError(f"image/label count mismatch: {len(images)} images vs {len(labels)} labels")
    return ImageSet(
        images[:, None, :, :],
        labels,
        {Path(images_path).name: file_digest(images_path), Path(labels_path).name: file_digest(labels_path)},
    )


def load_mnist(directory) -> dict:
    d = Path(directory)
    return {split: parse_idx(d / imgs, d / lbls) for split, (imgs, lbls) in MNIST_FILES.items()}


def parse_cifar(path) -> ImageSet:
    """Decode one CIFAR-10 binary batch (label byte + R, G, B planes per record)."""
    raw = _read_bytes(path)
    if len(raw) % CIFAR_RECORD:
        raise DataFormatError(f"{path}: size {len(raw)} is not a multiple of the {CIFAR_RECORD}-byte record")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].copy()
    if labels.max(initial=0) > 9:
        raise DataFormatError(f"{path}: label byte out of range")
    return ImageSet(rec[:, 1:].reshape(-1, 3, 32, 32), labels, {Path(path).name: hashlib.sha256(raw).hexdigest()})


def concat(sets: Sequence[ImageSet]) -> ImageSet:
    digests = {}
    for s in sets:
        digests.update(s.digests)
    return ImageSet(np.concatenate([s.images for s in sets]), np.concatenate([s.labels for s in sets]), digests)


def load_cifar(directory) -> dict:
    d = Path(directory)
    return {split: concat([parse_cifar(d / f) for f in files]) for split, files in CIFAR_SPLIT_FILES.items()}


# ------------------------------------------------------------------- synthesis
def mnist_bag_label(digits) -> int:
    """Positive iff any instance is a '0'."""
    return int(np.any(np.asarray(digits) == 0))


def _mnist_split(source: ImageSet, split: str, rng, first_id: int) -> BagDataset:
    order = rng.permutation(len(source))
    bags = []
    for k, start in enumerate(range(0, len(order), BAG_SIZE)):
        idx = np.sort(order[start:start + BAG_SIZE])
        y = source.labels[idx]
        bags.append(Bag(first_id + k, mnist_bag_label(y), idx, (y == 0).astype(np.int64), source))
    return BagDataset(bags, split, 0, "mnist", MNIST_BAG_CLASSES, dict(source.digests))


def make_mnist_bags(train: ImageSet, test: ImageSet, seed: int) -> tuple:
    """Group every image into bags of nine; the trailing partial bag keeps the remainder."""
    out = []
    first = 0
    for split, src in (("train", train), ("test", test)):
        ds = _mnist_split(src, split, stream(seed, "bags", len(out)), first)
        ds.seed = seed
        first += len(ds)
        out.append(ds)
    for ds in out:
        check_bag_labels(ds)
    return tuple(out)


def _positive_count(rng) -> int:
    # nine draws from the non-competing classes, each positive w.p. 1/9, given at least one
    while True:
        k = int(rng.binomial(BAG_SIZE, 1.0 / 9.0))
        if k >= 1:
            return k


class _Pool:
    """Shuffled per-category index pool; reshuffles when exhausted."""

    def __init__(self, indices, rng):
        self.indices = np.asarray(indices)
        self.rng = rng
        self.order = rng.permutation(self.indices)
        self.pos = 0
        self.cycles = 0

    def take(self, k: int) -> list:
        out = []
        while len(out) < k:
            if self.pos == len(self.order):
                self.order = self.rng.permutation(self.indices)
                self.pos = 0
                self.cycles += 1
            need = k - len(out)
            chunk = self.order[self.pos:self.pos + need]
            # a refill could repeat an image already in this bag
            out.extend(int(i) for i in chunk if int(i) not in out)
            self.pos += len(chunk)
        return out


def _cifar_split(source: ImageSet, split: str, per_class: int, rng, first_id: int) -> BagDataset:
    if len(source) == 0:
        raise DataFormatError(f"cifar {split}: no source images")
    labels = source.labels
    pools = {
        1: _Pool(np.flatnonzero(labels == 0), rng),
        2: _Pool(np.flatnonzero(labels == 1), rng),
        0: _Pool(np.flatnonzero(labels >= 2), rng),
    }
    for cat, pool in pools.items():
        if len(pool.indices) < BAG_SIZE:
            raise DataFormatError(f"cifar {split}: only {len(pool.indices)} images for category {cat}")
    plan = np.repeat([0, 1, 2], per_class)
    plan = plan[rng.permutation(len(plan))]
    bags = []
    for k, label in enumerate(plan):
        n_pos = 0 if label == 0 else _positive_count(rng)
        idx = pools[0].take(BAG_SIZE - n_pos)
        if n_pos:
            idx += pools[int(label)].take(n_pos)
        idx = np.asarray(idx)[rng.permutation(BAG_SIZE)]
        bags.append(Bag(first_id + k, int(label), idx, labels[idx].astype(np.int64), source))
    prov = dict(source.digests)
    prov["pool_reuse_cycles"] = {CIFAR_BAG_CLASSES[c]: p.cycles for c, p in pools.items()}
    return BagDataset(bags, split, 0, "cifar", CIFAR_BAG_CLASSES, prov)


def make_cifar_bags(train: ImageSet, val: ImageSet, test: ImageSet, seed: int, per_class=None) -> tuple:
    """Three-class bags (negative / airplane / car), equal bag counts per class."""
    per_class = dict(CIFAR_BAGS_PER_CLASS if per_class is None else per_class)
    out, first = [], 0
    for i, (split, src) in enumerate((("train", train), ("val", val), ("test", test))):
        ds = _cifar_split(src, split, per_class[split], stream(seed, "bags", 10 + i), first)
        ds.seed = seed
        first += len(ds)
        out.append(ds)
    for ds in out:
        check_bag_labels(ds)
    return tuple(out)


def cifar_bag_label(cifar_labels) -> int:
    y = np.asarray(cifar_labels)
    has_plane, has_car = bool(np.any(y == 0)), bool(np.any(y == 1))
    if has_plane and has_car:
        raise ValueError("bag mixes both positive classes")
    return 1 if has_plane else 2 if has_car else 0


def check_bag_labels(ds: BagDataset) -> None:
    """Re-derive every bag label from its instance labels; raise on the first disagreement."""
    for b in ds.bags:
        if ds.task == "mnist":
            digits = b.source.labels[b.indices] if b.source is not None else None
            expect = int(np.any(b.instance_labels == 1))
            if digits is not None and mnist_bag_label(digits) != expect:
                raise AssertionError(f"bag {b.bag_id}: instance labels disagree with source digits")
        else:
            expect = cifar_bag_label(b.instance_labels)
        if expect != b.label:
            raise AssertionError(f"bag {b.bag_id}: label {b.label} but instances imply {expect}")


# -------------------------------------------------------------------- manifests
def to_manifest(datasets: Sequence[BagDataset], extra: Optional[dict] = None) -> dict:
    first = datasets[0]
    doc = {
        "format_version": 1,
        "task": first.task,
        "seed": first.seed,
        "class_names": first.class_names,
        "splits": {},
    }
    for ds in datasets:
        doc["splits"][ds.split] = {
            "provenance": ds.provenance,
            "class_counts": ds.class_counts(),
            "bags": [
                {
                    "id": int(b.bag_id),
                    "label": int(b.label),
                    "indices": [int(i) for i in b.indices],
                    "instance_labels": [int(y) for y in b.instance_labels],
                }
                for b in ds.bags
            ],
        }
    if extra:
        doc.update(extra)
    return doc


def manifest_bytes(doc: dict) -> bytes:
    return (json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n").encode()


def manifest_digest(doc: dict) -> str:
    return hashlib.sha256(manifest_bytes(doc)).hexdigest()


def write_manifest(doc: dict, path) -> str:
    Path(path).write_bytes(manifest_bytes(doc))
    return manifest_digest(doc)


def read_manifest(path) -> dict:
    return json.loads(Path(path).read_text())


def datasets_from_manifest(doc: dict, sources: dict) -> dict:
    """Rebuild ``{split: BagDataset}`` against loaded ``{split: ImageSet}`` sources."""
    out = {}
    for split, body in doc["splits"].items():
        src = sources[split]
        for name, digest in body["provenance"].items():
            if isinstance(digest, str) and name in src.digests and src.digests[name] != digest:
                raise DataFormatError(f"{split}: source file {name} digest differs from the manifest")
        bags = [
            Bag(b["id"], b["label"], np.asarray(b["indices"], dtype=np.int64), np.asarray(b["instance_labels"]), src)
            for b in body["bags"]
        ]
        out[split] = BagDataset(bags, split, doc["seed"], doc["task"], doc["class_names"], body["provenance"])
    return out
