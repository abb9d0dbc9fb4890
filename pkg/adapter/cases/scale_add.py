"""Elementwise y = a * x + b on a 1-D buffer."""

import numpy as np

TOLERANCE = {"atol": 1e-6, "rtol": 1e-6}


def make_inputs(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(4096).astype(np.float32)
    a = np.float32(rng.uniform(0.5, 2.0))
    b = np.float32(rng.uniform(-1.0, 1.0))
    return x, a, b


def reference(x, a, b):
    return a * x + b
