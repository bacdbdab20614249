import numpy as np
import pytest


def central_diff(fun, x, eps=1e-4):
    """Central finite differences of a scalar function, elementwise over x."""
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp.flat[i] += eps
        xm.flat[i] -= eps
        out.flat[i] = (fun(xp) - fun(xm)) / (2.0 * eps)
    return out


def rel_err(a, b):
    """Norm-wise relative error of a against reference b."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


@pytest.fixture
def rng():
    return np.random.default_rng(20240801)
