#!/usr/bin/env python3
"""Build a desk-scale MNIST split in IDX format.

Source: the `mnist` npm package (10,000 MNIST digits stored as JSON
arrays of 784 intensities in [0, 1]). Every fifth sample of each digit
goes to the test split; the rest go to the training split. Output files
use the canonical IDX layout (big-endian magic 0x00000803 / 0x00000801).

usage: scripts/fetch_mnist.py [OUT_DIR]   (default: data/mnist)
"""
import json
import os
import struct
import subprocess
import sys
import tarfile
import tempfile

PACKAGE = "mnist@1.1.0"


def write_idx(out_dir, prefix, images, labels):
    with open(os.path.join(out_dir, f"{prefix}-images-idx3-ubyte"), "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))
    with open(os.path.join(out_dir, f"{prefix}-labels-idx1-ubyte"), "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main():
    out_dir = sys.argv[1] if len(sys.argv) > 1 else "data/mnist"
    os.makedirs(out_dir, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(["npm", "pack", PACKAGE], cwd=tmp, check=True,
                       stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL)
        tgz = [p for p in os.listdir(tmp) if p.endswith(".tgz")][0]
        with tarfile.open(os.path.join(tmp, tgz)) as tar:
            tar.extractall(tmp)
        per_class = []
        for digit in range(10):
            path = os.path.join(tmp, "package", "src", "digits", f"{digit}.json")
            with open(path) as f:
                flat = json.load(f)["data"]
            pixels = [min(255, max(0, round(v * 255))) for v in flat]
            per_class.append([pixels[i:i + 784] for i in range(0, len(pixels), 784)])

    train, test = ([], []), ([], [])
    longest = max(len(c) for c in per_class)
    # round-robin over classes keeps both splits class-interleaved
    for i in range(longest):
        for digit, samples in enumerate(per_class):
            if i < len(samples):
                split = test if i % 5 == 4 else train
                split[0].append(samples[i])
                split[1].append(digit)
    write_idx(out_dir, "train", *train)
    write_idx(out_dir, "t10k", *test)
    print(f"wrote {len(train[1])} train / {len(test[1])} test samples to {out_dir}")


if __name__ == "__main__":
    main()
