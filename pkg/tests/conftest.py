import numpy as np
import pytest

from orthoadapt import autodiff as ad


def rel_err(analytic, numeric) -> float:
    """Max-norm relative error of ``analytic`` against ``numeric``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return float(np.abs(a - n).max() / max(np.abs(n).max(), np.abs(a).max(), 1e-12))


def grad_of(f, x: np.ndarray) -> np.ndarray:
    """Reverse-mode gradient of scalar ``f`` at ``x``."""
    leaf = ad.Tensor(x.copy(), requires_grad=True)
    ad.backward(f(leaf))
    return leaf.grad


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
