"""Central finite-difference gradient checks (run in float64)."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, precision


def relative_error(a, b) -> float:
    """Norm-wise relative error ``|a - b| / max(|a|, |b|)`` (0 when both vanish)."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)


def numeric_gradient(fn, arrays, index, h=1e-3):
    """d fn / d arrays[index] by central differences; ``fn`` maps a list of
    arrays to a scalar."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    x = arrays[index]
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = fn(arrays)
        x[i] = old - h
        fm = fn(arrays)
        x[i] = old
        grad[i] = (fp - fm) / (2 * h)
    return grad


def check_gradients(fn, arrays, h=1e-3, wrt=None):
    """Compare analytic and finite-difference gradients.

    ``fn`` receives a list of Tensors and returns a scalar Tensor. Returns the
    worst relative error over the checked inputs.
    """
    wrt = range(len(arrays)) if wrt is None else wrt
    with precision(np.float64):
        tensors = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
        fn(tensors).backward()
        analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

        def scalar(arrs):
            return float(fn([Tensor(a) for a in arrs]).data)

        worst = 0.0
        for i in wrt:
            num = numeric_gradient(scalar, arrays, i, h)
            worst = max(worst, relative_error(analytic[i], num))
    return worst
