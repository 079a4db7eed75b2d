"""Shared test utilities: finite-difference gradients and error metrics."""

import numpy as np


def numeric_grad(f, x, h=1e-5):
    """Central-difference gradient of scalar-valued f with respect to x.

    x is perturbed in place (and restored); f takes no arguments and must
    read x afresh on every call. x must be float64 for the 1e-6 tolerances
    used throughout.
    """
    assert x.dtype == np.float64, "finite differences need 64-bit inputs"
    grad = np.zeros(x.shape, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        f_plus = f()
        x[i] = orig - h
        f_minus = f()
        x[i] = orig
        grad[i] = (f_plus - f_minus) / (2.0 * h)
        it.iternext()
    return grad


def rel_err(a, b):
    """Max absolute difference normalized by the largest magnitude present."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / scale)
