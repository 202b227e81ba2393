"""Central finite-difference gradient checks."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numerical_gradient(f: Callable[[], float], array: np.ndarray, step: float = 1e-5, indices=None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. entries of ``array`` (mutated and restored).

    ``indices`` restricts the check to a subset of flat positions; other
    entries of the result are NaN.
    """
    flat = array.reshape(-1)
    out = np.full(flat.shape, np.nan)
    positions = range(flat.size) if indices is None else indices
    for i in positions:
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * step)
    return out.reshape(array.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """``||a - n|| / max(||a||, ||n||, floor)`` over the entries both define."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    keep = ~np.isnan(n)
    a, n = a[keep], n[keep]
    scale = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / scale)


def check_gradients(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    step: float = 1e-5,
    seed: int = 0,
) -> list[float]:
    """Compare autograd against finite differences for ``sum(fn(*inputs) * w)``.

    A fixed random weighting ``w`` turns tensor outputs into a scalar without
    making every output entry count equally. Returns one relative error per
    input.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    probe = fn(*[Tensor(a) for a in arrays])
    weights = np.random.default_rng(seed).uniform(-1.0, 1.0, size=probe.shape)

    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*tensors)
    (out * weights).sum().backward()
    errors = []
    for t, a in zip(tensors, arrays):

        def scalar() -> float:
            return float((fn(*[Tensor(x) for x in arrays]).data * weights).sum())

        numeric = numerical_gradient(scalar, a, step)
        analytic = t.grad if t.grad is not None else np.zeros_like(a)
        errors.append(relative_error(analytic, numeric))
    return errors
