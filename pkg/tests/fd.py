"""Finite-difference oracles, independent of the autodiff engine.

Central differences on float64: error ~ h^2 * f''' + eps/h, so h=1e-5
gives ~1e-10 absolute error for O(1) values, comfortably below the
tolerances asserted against it.
"""

import numpy as np


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Gradient of scalar-valued f at x, every entry via central differences."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def numeric_grad_entries(f, x: np.ndarray, entries, h: float = 1e-5) -> np.ndarray:
    """Central differences at selected flat indices only (for big params)."""
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1)
    out = np.zeros(len(entries))
    for j, i in enumerate(entries):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        out[j] = (fp - fm) / (2.0 * h)
    return out


def rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """Max elementwise relative error with an absolute floor for tiny values."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
