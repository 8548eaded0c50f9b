#!/usr/bin/env python3
"""Rebuild data/mnist/*.gz (IDX format) from the `mnist` npm package.

The npm package ships 10,000 MNIST digits as per-class JSON arrays of
pixel/255 values rounded to three decimals. This script restores the byte
values, interleaves the classes with a fixed permutation and writes the
standard IDX image/label files, gzip-compressed.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist_from_npm.py package/src/digits data/mnist
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path

src, dst = Path(sys.argv[1]), Path(sys.argv[2])
samples = []
for digit in range(10):
    flat = json.loads((src / f"{digit}.json").read_text())["data"]
    for k in range(len(flat) // 784):
        px = bytes(min(255, round(v * 255)) for v in flat[k * 784:(k + 1) * 784])
        samples.append((px, digit))
random.Random(20240611).shuffle(samples)
dst.mkdir(parents=True, exist_ok=True)
n = len(samples)
with gzip.GzipFile(dst / "mnist-10k-images-idx3-ubyte.gz", "wb", mtime=0) as f:
    f.write(struct.pack(">IIII", 0x00000803, n, 28, 28))
    for px, _ in samples:
        f.write(px)
with gzip.GzipFile(dst / "mnist-10k-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
    f.write(struct.pack(">II", 0x00000801, n))
    f.write(bytes(label for _, label in samples))
print(f"wrote {n} samples to {dst}")
