#!/usr/bin/env python3
"""Build the class-balanced FashionMNIST subset used by the desk-scale experiments.

The source is the `fashion-mnist` npm package, which ships the full 70k image
corpus as one JSON file per class. The first 6000 images of each class file are
taken as the train pool and the remaining 1000 as the test pool; the subset keeps
the first N/10 entries of each pool and writes standard IDX files.

    npm pack fashion-mnist && tar xzf fashion-mnist-*.tgz
    python3 tools/make_fashion_subset.py package/src/clothes data/fashion_mnist_subset
"""
import argparse
import json
import pathlib
import struct

TRAIN_POOL = 6000


def write_images(path, images):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x803, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))


def write_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x801, len(labels)))
        f.write(bytes(labels))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("clothes_dir")
    ap.add_argument("out_dir")
    ap.add_argument("--train", type=int, default=6000)
    ap.add_argument("--test", type=int, default=1000)
    args = ap.parse_args()

    per_train, per_test = args.train // 10, args.test // 10
    train, test = [], []
    for label in range(10):
        data = json.loads((pathlib.Path(args.clothes_dir) / f"{label}.json").read_text())["data"]
        data = [img for img in data if len(img) == 784]
        train += [(img, label) for img in data[:per_train]]
        test += [(img, label) for img in data[TRAIN_POOL:TRAIN_POOL + per_test]]

    # interleave classes so that prefixes stay balanced
    def interleave(rows, per):
        return [rows[c * per + i] for i in range(per) for c in range(10)]

    train, test = interleave(train, per_train), interleave(test, per_test)
    out = pathlib.Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_images(out / "train-images-idx3-ubyte", [i for i, _ in train])
    write_labels(out / "train-labels-idx1-ubyte", [l for _, l in train])
    write_images(out / "t10k-images-idx3-ubyte", [i for i, _ in test])
    write_labels(out / "t10k-labels-idx1-ubyte", [l for _, l in test])


if __name__ == "__main__":
    main()
