import numpy as np
import pytest

from stgscale import tensorcore as tc


def fd_grad(f, param: tc.Parameter, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. ``param``."""
    g = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + h
        up = f().item()
        flat[k] = old - h
        down = f().item()
        flat[k] = old
        g.reshape(-1)[k] = (up - down) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
