import numpy as np
import pytest

from mvtryon import numerics as num
from mvtryon.numerics import Tensor


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """|a - n| / max(1, |a|, |n|), maximized over elements."""
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))


def numeric_grads(scalar_fn, tensors, h: float = 1e-5, coords=None):
    """Central finite differences of scalar_fn() w.r.t. each tensor's data.

    ``coords`` optionally restricts the check to flat indices per tensor.
    """
    grads = []
    for k, t in enumerate(tensors):
        flat = t.data.ravel()
        idx = range(flat.size) if coords is None else coords[k]
        g = np.zeros_like(flat)
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            fp = scalar_fn()
            flat[i] = old - h
            fm = scalar_fn()
            flat[i] = old
            g[i] = (fp - fm) / (2.0 * h)
        grads.append(g.reshape(t.data.shape))
    return grads


def check_grads(build_loss, tensors, tol: float = 1e-4, h: float = 1e-5, coords=None) -> float:
    """Compare backward() grads against central differences; returns worst error.

    ``build_loss`` must rebuild the forward graph from the tensors' current
    data on every call (the tape is single-use).
    """
    for t in tensors:
        t.zero_grad()
    loss = build_loss()
    num.backward(loss)
    analytic = []
    for t in tensors:
        assert t.grad is not None, "leaf did not receive a gradient"
        analytic.append(t.grad.copy())
        t.zero_grad()
    numeric = numeric_grads(lambda: build_loss().item(), tensors, h=h, coords=coords)
    if coords is not None:
        worst = 0.0
        for k, (a, n) in enumerate(zip(analytic, numeric)):
            for i in coords[k]:
                worst = max(worst, rel_err(a.ravel()[i:i + 1], n.ravel()[i:i + 1]))
    else:
        worst = max(rel_err(a, n) for a, n in zip(analytic, numeric))
    assert worst <= tol, f"gradient mismatch: rel err {worst:.3e} > {tol}"
    return worst


def projection_loss(out: Tensor, seed: int = 0) -> Tensor:
    """Fixed random projection of an output tensor to a scalar (full-Jacobian probe)."""
    r = Tensor(np.random.default_rng(seed).normal(size=out.shape))
    return num.tsum(num.mul(out, r))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
