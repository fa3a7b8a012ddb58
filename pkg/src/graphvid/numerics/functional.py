"""Fused differentiable primitives with hand-written adjoints.

Softmax-like reductions always subtract the running maximum before
exponentiating. Masks are boolean arrays (True = keep) that broadcast against
the input; masked entries get probability exactly zero.
"""

from __future__ import annotations

import math

import numpy as np

from .autograd import Tensor, _lift, _make, _unbroadcast


def _masked_max(x: np.ndarray, axis: int, mask) -> np.ndarray:
    if mask is None:
        return np.max(x, axis=axis, keepdims=True)
    filled = np.where(mask, x, -np.inf)
    m = np.max(filled, axis=axis, keepdims=True)
    return np.where(np.isfinite(m), m, 0.0)


def _softmax_np(x: np.ndarray, axis: int = -1, mask=None) -> np.ndarray:
    m = _masked_max(x, axis, mask)
    e = np.exp(x - m)
    if mask is not None:
        e = np.where(mask, e, 0.0)
    s = e.sum(axis=axis, keepdims=True)
    return (e / np.where(s > 0, s, 1.0)).astype(x.dtype, copy=False)


def softmax(x: Tensor, axis: int = -1, mask=None) -> Tensor:
    """Softmax along ``axis``; fully masked slices return zeros."""
    if x.shape[axis] < 1:
        raise ValueError("softmax over an empty axis")
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    y = _softmax_np(x.data, axis, mask)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)
    return _make(y, (x,), bw, "softmax")


def softmax_rows(x: Tensor) -> Tensor:
    return softmax(x, axis=-1)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] < 1:
        raise ValueError("log_softmax over an empty axis")
    xd = x.data
    m = np.max(xd, axis=axis, keepdims=True)
    shifted = xd - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)
    return _make(out, (x,), bw, "log_softmax")


def logsumexp(x: Tensor, axis: int = -1, mask=None) -> Tensor:
    """Stable log-sum-exp along ``axis`` (dropped); masked entries are excluded."""
    xd = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), xd.shape)
    m = _masked_max(xd, axis, mask)
    e = np.exp(xd - m)
    if mask is not None:
        e = np.where(mask, e, 0.0)
    s = e.sum(axis=axis, keepdims=True)
    if np.any(s <= 0):
        raise ValueError("logsumexp over a slice with no unmasked entries")
    out = (np.log(s) + m).squeeze(axis)
    p = e / s

    def bw(g):
        return (np.expand_dims(g, axis) * p,)
    return _make(out.astype(xd.dtype, copy=False), (x,), bw, "logsumexp")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ValueError("eps must be positive")
    d = x.shape[-1]
    if d < 1 or gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(f"layer_norm shape mismatch: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    lead = tuple(range(xd.ndim - 1))

    def bw(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        gg = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gb = g.sum(axis=lead) if beta.requires_grad else None
        return gx, gg, gb
    return _make(out.astype(xd.dtype, copy=False), (x, gamma, beta), bw, "layer_norm")


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, causal_mask: bool = False,
                         key_mask=None) -> Tensor:
    """Softmax(Q Kᵀ / sqrt(d_k)) V over the last two axes, leading axes batched.

    ``key_mask`` (…, m) marks keys that may be attended to; ``causal_mask``
    hides keys to the right of each query.
    """
    qd, kd, vd = q.data, k.data, v.data
    n, dk = qd.shape[-2:]
    m = kd.shape[-2]
    if kd.shape[-1] != dk or vd.shape[-2] != m:
        raise ValueError(f"attention shape mismatch q {qd.shape} k {kd.shape} v {vd.shape}")
    if causal_mask and n != m:
        raise ValueError("causal attention needs as many queries as keys")
    scale = 1.0 / math.sqrt(dk)
    scores = (qd @ np.swapaxes(kd, -1, -2)) * scale
    mask = None
    if causal_mask:
        mask = np.tril(np.ones((n, m), dtype=bool))
    if key_mask is not None:
        km = np.asarray(key_mask, dtype=bool)[..., None, :]
        mask = km if mask is None else (mask & km)
    if mask is not None:
        mask = np.broadcast_to(mask, scores.shape)
    w = _softmax_np(scores, -1, mask)
    out = w @ vd

    def bw(g):
        gv = _unbroadcast(np.swapaxes(w, -1, -2) @ g, vd.shape) if v.requires_grad else None
        gw = g @ np.swapaxes(vd, -1, -2)
        gs = w * (gw - (gw * w).sum(axis=-1, keepdims=True)) * scale
        gq = _unbroadcast(gs @ kd, qd.shape) if q.requires_grad else None
        gk = _unbroadcast(np.swapaxes(gs, -1, -2) @ qd, kd.shape) if k.requires_grad else None
        return gq, gk, gv
    return _make(out, (q, k, v), bw, "attention")


def cross_entropy(logits: Tensor, targets, reduction: str = "mean") -> Tensor:
    """Negative log-likelihood of integer ``targets`` under softmax(``logits``) on the last axis."""
    ld = logits.data
    K = ld.shape[-1]
    flat = ld.reshape(-1, K)
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != flat.shape[0]:
        raise ValueError("one target per logit row is required")
    if t.size and (t.min() < 0 or t.max() >= K):
        raise ValueError("target index out of range")
    m = flat.max(axis=1, keepdims=True)
    shifted = flat - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    rows = np.arange(flat.shape[0])
    nll = -logp[rows, t]
    denom = flat.shape[0] if reduction == "mean" else 1.0
    out = np.asarray(nll.sum() / denom, dtype=ld.dtype)

    def bw(g):
        p = np.exp(logp)
        p[rows, t] -= 1.0
        return ((p * (g / denom)).reshape(ld.shape),)
    return _make(out, (logits,), bw, "cross_entropy")


def mse(a: Tensor, b) -> Tensor:
    diff = a - _lift(b, a)
    return (diff * diff).mean()


def l2_normalize_rows(x: Tensor, what: str = "vector") -> Tensor:
    """Divide each last-axis vector by its Euclidean norm; zero-norm rows are an error."""
    sq = (x * x).sum(axis=-1, keepdims=True)
    if np.any(sq.data <= 0):
        raise ValueError(f"zero-norm {what}: cosine similarity is undefined")
    return x / sq.sqrt()


def cosine_matrix(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise cosine similarities: (…, A, d) × (…, B, d) -> (…, A, B)."""
    return l2_normalize_rows(a) @ l2_normalize_rows(b).swapaxes(-1, -2)
