#!/usr/bin/env python3
"""Build a 10k-image MNIST subset in IDX format from the `mnist` npm package.

The npm package ships 10,000 MNIST digits as JSON arrays of pixel/255 values.
This script repacks them as gzip-compressed IDX files:

    data/mnist-10k/images-idx3-ubyte.gz
    data/mnist-10k/labels-idx1-ubyte.gz

Usage: scripts/fetch_mnist_subset.py [OUT_DIR]
"""
import gzip
import json
import os
import struct
import subprocess
import sys
import tarfile
import tempfile

ROWS = COLS = 28


def main():
    out_dir = sys.argv[1] if len(sys.argv) > 1 else os.path.join(
        os.path.dirname(__file__), "..", "data", "mnist-10k")
    os.makedirs(out_dir, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(["npm", "pack", "mnist@1.1.0"], cwd=tmp, check=True,
                       stdout=subprocess.DEVNULL)
        with tarfile.open(os.path.join(tmp, "mnist-1.1.0.tgz")) as tar:
            tar.extractall(tmp)
        images = bytearray()
        labels = bytearray()
        for digit in range(10):
            path = os.path.join(tmp, "package", "src", "digits", f"{digit}.json")
            with open(path) as f:
                data = json.load(f)["data"]
            assert len(data) % (ROWS * COLS) == 0
            for v in data:
                images.append(max(0, min(255, round(v * 255))))
            labels.extend([digit] * (len(data) // (ROWS * COLS)))
    n = len(labels)
    with gzip.GzipFile(os.path.join(out_dir, "images-idx3-ubyte.gz"), "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, n, ROWS, COLS))
        f.write(bytes(images))
    with gzip.GzipFile(os.path.join(out_dir, "labels-idx1-ubyte.gz"), "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, n))
        f.write(bytes(labels))
    print(f"wrote {n} images to {out_dir}")


if __name__ == "__main__":
    main()
