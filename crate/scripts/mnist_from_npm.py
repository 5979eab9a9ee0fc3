#!/usr/bin/env python3
"""Convert the digit samples shipped in the `mnist` npm package into IDX files.

The package bundles 10,000 MNIST digits as JSON float arrays in [0, 1]
(src/digits/<label>.json). Each class is split 80/20 in file order into
train-images-idx3-ubyte / t10k-images-idx3-ubyte (plus label files).

usage: npm pack mnist && tar xzf mnist-*.tgz
       python3 scripts/mnist_from_npm.py package/src/digits data/mnist
"""
import json
import os
import struct
import sys

SIDE = 28


def write_idx(prefix, images, labels):
    with open(prefix + "-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), SIDE, SIDE))
        for img in images:
            f.write(bytes(img))
    with open(prefix + "-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main(src, dst):
    train, test = ([], []), ([], [])
    for label in range(10):
        with open(os.path.join(src, f"{label}.json")) as f:
            raw = json.load(f)["data"]
        n = len(raw) // (SIDE * SIDE)
        cut = (n * 4) // 5
        for i in range(n):
            px = raw[i * SIDE * SIDE:(i + 1) * SIDE * SIDE]
            img = [max(0, min(255, round(v * 255))) for v in px]
            split = train if i < cut else test
            split[0].append(img)
            split[1].append(label)
    os.makedirs(dst, exist_ok=True)
    write_idx(os.path.join(dst, "train"), *train)
    write_idx(os.path.join(dst, "t10k"), *test)
    print(f"train={len(train[1])} test={len(test[1])}")


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
