import numpy as np
import pytest

from kamkit.rng import Rng


@pytest.fixture
def rng():
    return Rng(1234)


def numerical_gradient(loss_fn, arrays, eps=1e-6):
    """Test-local central differences (float64); independent of the engine tape."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            lp = loss_fn()
            flat[i] = orig - eps
            lm = loss_fn()
            flat[i] = orig
            gflat[i] = (lp - lm) / (2 * eps)
        grads.append(g)
    return grads


def max_rel_err(analytic, numeric):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum.reduce([np.abs(analytic), np.abs(numeric),
                               np.full_like(analytic, 1e-4)])
    return float((np.abs(analytic - numeric) / denom).max())
