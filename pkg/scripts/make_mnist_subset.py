"""Write a small MNIST subset in IDX format for offline tests.

The digits come from the 5000-sample MNIST extract bundled with mlxtend
(500 training-set digits per class).  They are shuffled with a fixed seed
and split into 1000 "train" and 1000 "test" samples, written gzipped to
``tests/data/mnist_subset`` by default.

    python scripts/make_mnist_subset.py [outdir]
"""

import sys

import numpy as np
from mlxtend.data import mnist_data

from fedquant.data import write_mnist

N_TRAIN = 1000
N_TEST = 1000


def main(outdir="tests/data/mnist_subset"):
    x, y = mnist_data()
    order = np.random.default_rng(0).permutation(len(y))
    x = x[order].reshape(-1, 28, 28).astype(np.uint8)
    y = y[order].astype(np.uint8)
    train = slice(0, N_TRAIN)
    test = slice(N_TRAIN, N_TRAIN + N_TEST)
    write_mnist(outdir, x[train], y[train], x[test], y[test], compress=True)
    print(f"wrote {N_TRAIN} train / {N_TEST} test digits to {outdir}")


if __name__ == "__main__":
    main(*sys.argv[1:])
