from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autograd import NonFiniteError, Tensor, backward, no_grad


def _value(f: Callable[[], Tensor]) -> float:
    with no_grad():
        v = f()
    v = float(v.data.reshape(-1)[0]) if isinstance(v, Tensor) else float(v)
    if not np.isfinite(v):
        raise NonFiniteError("objective is not finite")
    return v


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
               max_coords: int | None = None, seed: int = 0) -> float:
    """Largest relative error between backprop and central differences.

    For each parameter tensor the error is ``|a - n| / max(1e-8, |a| + |n|)``
    with Euclidean norms taken over the checked coordinates of that tensor.
    ``max_coords`` limits how many coordinates per tensor are perturbed
    (chosen at random with ``seed``); run this in double precision.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    for p in params:
        p.grad = None
    out = f()
    if not np.isfinite(out.data).all():
        raise NonFiniteError("objective is not finite")
    backward(out)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        analytic_full = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        analytic = analytic_full.reshape(-1)[coords].astype(np.float64)
        numeric = np.empty(len(coords))
        for k, idx in enumerate(coords):
            orig = flat[idx]
            flat[idx] = orig + eps
            up = _value(f)
            flat[idx] = orig - eps
            down = _value(f)
            flat[idx] = orig
            numeric[k] = (up - down) / (2.0 * eps)
        err = np.linalg.norm(analytic - numeric) / max(
            1e-8, np.linalg.norm(analytic) + np.linalg.norm(numeric))
        worst = max(worst, float(err))
    for p in params:
        p.grad = None
    return worst
