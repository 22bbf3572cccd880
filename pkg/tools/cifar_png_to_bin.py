"""Rebuild CIFAR-10 binary batches from the PNG strips of the ``tfjs-cifar10`` npm package.

Each PNG is 1024 px wide and 10000 px tall: one image per row, pixels in
row-major HWC order.  The output follows the canonical binary layout
(1 label byte + 1024 R + 1024 G + 1024 B bytes per record).

Usage::

    npm pack tfjs-cifar10 && tar xzf tfjs-cifar10-*.tgz
    python tools/cifar_png_to_bin.py package/ data/cifar-10-batches-bin/
"""
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

BATCHES = ["data_batch_1", "data_batch_2", "data_batch_3", "data_batch_4", "data_batch_5"]


def convert(png: Path, labels: list, out: Path) -> None:
    rows = np.asarray(Image.open(png).convert("RGB"), dtype=np.uint8)
    n = rows.shape[0]
    planes = rows.reshape(n, 32, 32, 3).transpose(0, 3, 1, 2).reshape(n, 3072)
    records = np.empty((n, 3073), dtype=np.uint8)
    records[:, 0] = np.asarray(labels, dtype=np.uint8)
    records[:, 1:] = planes
    out.write_bytes(records.tobytes())


def main(src: str, dst: str) -> None:
    src_dir, dst_dir = Path(src), Path(dst)
    dst_dir.mkdir(parents=True, exist_ok=True)
    train_labels = json.loads((src_dir / "train_lables.json").read_text())
    test_labels = json.loads((src_dir / "test_lables.json").read_text())
    for i, name in enumerate(BATCHES):
        convert(src_dir / f"{name}.png", train_labels[i * 10000:(i + 1) * 10000], dst_dir / f"{name}.bin")
    convert(src_dir / "test_batch.png", test_labels, dst_dir / "test_batch.bin")


if __name__ == "__main__":
    main(*sys.argv[1:3])
