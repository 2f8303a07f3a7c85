"""Regenerate the codec golden payloads in tests/data/golden.

Only rerun this after a deliberate wire-format change; the test suite
compares encode() output against these files byte for byte.
"""

import os
from collections import OrderedDict

import numpy as np

from fedquant.codec import ClientUpdate, RawTensor, Strategy, encode
from fedquant.quant import QuantizedTensor

OUT = os.path.join(os.path.dirname(__file__), "..", "tests", "data", "golden")


def golden_updates():
    rng = np.random.default_rng(2024)
    layers = [
        QuantizedTensor(rng.integers(0, 2 ** b, n), float(np.float32(s)), b)
        for b, n, s in ((1, 13, 0.5), (2, 3, 1.0), (3, 10, 0.25), (8, 5, 0.125), (32, 2, 2.0))
    ]
    side = OrderedDict([("fc2.bias", np.linspace(-1, 1, 4, dtype=np.float32)),
                        ("bn4.weight", np.ones((2, 2), np.float32))])
    return {
        "fedavg.bin": ClientUpdate(3, Strategy.FEDAVG, layers, dataset_size=200),
        "msqe.bin": ClientUpdate(3, Strategy.INVERSE_MSQE, layers, msqe=[float(np.float32(e)) for e in (0.5, 0.25, 1e-3, 1e-6, 0.0)]),
        "sideband.bin": ClientUpdate(0, Strategy.FEDAVG, layers[:2], dataset_size=7, side_band=side),
        "raw.bin": ClientUpdate(1, Strategy.FEDAVG, [RawTensor(np.array([1.5, -2.0, 0.0], np.float32))],
                                dataset_size=1),
    }


if __name__ == "__main__":
    os.makedirs(OUT, exist_ok=True)
    for name, update in golden_updates().items():
        with open(os.path.join(OUT, name), "wb") as f:
            f.write(encode(update))
        print(name)
