#!/usr/bin/env python3
"""Build the bundled MNIST subset (IDX format) from the `mnist` npm package.

The npm package (MIT, Juan Cazala) ships 10,000 MNIST digits as JSON arrays
of 784 intensities in [0, 1]. This script takes the first TRAIN_PER_CLASS
digits of every class for the training file and the next TEST_PER_CLASS for
the test file, interleaves classes deterministically, and writes standard
IDX3/IDX1 files.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 tools/scripts/make_mnist_subset.py package/src/digits data/mnist_subset
"""
import json
import struct
import sys
from pathlib import Path

TRAIN_PER_CLASS = 200
TEST_PER_CLASS = 200


def write_idx_images(path, images):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))


def write_idx_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main(src, dst):
    src, dst = Path(src), Path(dst)
    per_class = []
    for digit in range(10):
        flat = json.loads((src / f"{digit}.json").read_text())["data"]
        count = len(flat) // 784
        imgs = [[max(0, min(255, round(v * 255))) for v in flat[i * 784:(i + 1) * 784]]
                for i in range(count)]
        per_class.append(imgs)

    def take(lo, hi):
        images, labels = [], []
        for i in range(lo, hi):
            for digit in range(10):
                images.append(per_class[digit][i])
                labels.append(digit)
        return images, labels

    dst.mkdir(parents=True, exist_ok=True)
    tr_x, tr_y = take(0, TRAIN_PER_CLASS)
    te_x, te_y = take(TRAIN_PER_CLASS, TRAIN_PER_CLASS + TEST_PER_CLASS)
    write_idx_images(dst / "train-images.idx3-ubyte", tr_x)
    write_idx_labels(dst / "train-labels.idx1-ubyte", tr_y)
    write_idx_images(dst / "test-images.idx3-ubyte", te_x)
    write_idx_labels(dst / "test-labels.idx1-ubyte", te_y)
    print(f"train={len(tr_y)} test={len(te_y)}")


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
