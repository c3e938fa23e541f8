import numpy as np
import pytest


@pytest.fixture
def gen():
    return np.random.default_rng(1234)


def seeded(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)


def central_diff_grad(loss_fn, x: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    """Finite-difference gradient of a scalar loss w.r.t. every element of x.

    Perturbs x in place (restoring it), so loss_fn must re-read x on each call.
    """
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = loss_fn()
        flat[i] = orig - eps
        fm = loss_fn()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def max_rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))
