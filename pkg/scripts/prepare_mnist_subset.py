"""Write a real-MNIST subset as standard IDX archives for offline runs.

The 5000-digit sample bundled with mlxtend (500 per class) is split per
class into the first 400 for training and the last 100 for testing, then
written as ``<root>/mnist/{train,t10k}-{images-idx3,labels-idx1}-ubyte.gz``.

    pip install mlxtend
    python scripts/prepare_mnist_subset.py --root data
"""
import argparse
from pathlib import Path

import numpy as np

from antigan.data import write_idx


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--root", default="data")
    parser.add_argument("--test-per-class", type=int, default=100)
    args = parser.parse_args()

    from mlxtend.data import mnist_data

    x, y = mnist_data()
    x = x.astype(np.uint8).reshape(-1, 28, 28)
    y = y.astype(np.uint8)
    train_idx, test_idx = [], []
    for c in range(10):
        idx = np.flatnonzero(y == c)
        train_idx.append(idx[: len(idx) - args.test_per_class])
        test_idx.append(idx[len(idx) - args.test_per_class:])
    out = Path(args.root) / "mnist"
    out.mkdir(parents=True, exist_ok=True)
    for split, parts in (("train", train_idx), ("t10k", test_idx)):
        # interleave classes so any prefix stays roughly balanced
        idx = np.stack(parts, axis=1).reshape(-1)
        write_idx(out / f"{split}-images-idx3-ubyte.gz", x[idx])
        write_idx(out / f"{split}-labels-idx1-ubyte.gz", y[idx])
        print(f"{split}: {len(idx)} images -> {out}")


if __name__ == "__main__":
    main()
