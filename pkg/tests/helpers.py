"""Shared test oracles: finite differences and small brute-force utilities.

These stay independent of the library's gradient code paths: they only ever
call scalar-valued closures.
"""

import numpy as np


def central_fd(fn, x, h=1e-5):
    """Central finite-difference gradient of a scalar function of an array."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        xp = x.copy()
        xm = x.copy()
        xp[idx] += h
        xm[idx] -= h
        grad[idx] = (fn(xp) - fn(xm)) / (2.0 * h)
        it.iternext()
    return grad


def max_rel_err(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), floor)))


def random_spd(dim, rng, scale=1.0):
    a = rng.standard_normal((dim, dim))
    return scale ** 2 * (a @ a.T) / dim + 0.1 * scale ** 2 * np.eye(dim)
