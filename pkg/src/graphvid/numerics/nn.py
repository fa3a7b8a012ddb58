"""Parameter containers and the transformer building blocks shared by every model."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import functional as F
from .autograd import Tensor, concat, gelu, get_default_dtype, pad

INIT_STD = 0.02


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.op = "param"


def normal_init(rng: np.random.Generator, shape, std: float = INIT_STD) -> Parameter:
    return Parameter(rng.normal(0.0, std, size=shape))


class Module:
    """Minimal module base: parameters are discovered by walking attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{full}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = set(own) - set(state)
            extra = set(state) - set(own)
            if missing or extra:
                raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in own.items():
            if name not in state:
                continue
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)

    def to(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def freeze(self) -> "Module":
        for p in self.parameters():
            p.requires_grad = False
        return self

    def unfreeze(self) -> "Module":
        for p in self.parameters():
            p.requires_grad = True
        return self


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = normal_init(rng, (d_in, d_out))
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(d))
        self.beta = Parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gamma, self.beta, self.eps)


class TransformerLayer(Module):
    """Post-norm layer: attention, add & norm, two-layer perceptron, add & norm.

    Optional ``enc`` encodings are added to the query/key inputs only; values
    come from the raw token states.
    """

    def __init__(self, d: int, heads: int, rng: np.random.Generator, ff_mult: int = 4):
        if heads < 1 or d % heads:
            raise ValueError(f"model width {d} is not divisible by {heads} heads")
        self.d, self.heads = d, heads
        self.wq = Linear(d, d, rng)
        # a key bias shifts every score of a query equally, so it has no effect
        self.wk = Linear(d, d, rng, bias=False)
        self.wv = Linear(d, d, rng)
        self.wo = Linear(d, d, rng)
        self.norm1 = LayerNorm(d)
        self.ff1 = Linear(d, ff_mult * d, rng)
        self.ff2 = Linear(ff_mult * d, d, rng)
        self.norm2 = LayerNorm(d)

    def _split(self, x: Tensor) -> Tensor:
        *lead, n, d = x.shape
        x = x.reshape(*lead, n, self.heads, d // self.heads)
        return x.swapaxes(-2, -3)

    def _merge(self, x: Tensor) -> Tensor:
        x = x.swapaxes(-2, -3)
        *lead, n, h, dh = x.shape
        return x.reshape(*lead, n, h * dh)

    def __call__(self, x: Tensor, enc: Tensor | None = None, causal: bool = False,
                 key_mask=None) -> Tensor:
        qk_in = x if enc is None else x + enc
        q = self._split(self.wq(qk_in))
        k = self._split(self.wk(qk_in))
        v = self._split(self.wv(x))
        km = None if key_mask is None else np.asarray(key_mask, dtype=bool)[..., None, :]
        attn = F.scaled_dot_attention(q, k, v, causal_mask=causal, key_mask=km)
        x = self.norm1(x + self.wo(self._merge(attn)))
        return self.norm2(x + self.ff2(gelu(self.ff1(x))))


    def step(self, x: Tensor, enc: Tensor | None, cache: dict) -> Tensor:
        """Inference-only causal forward of the newest positions ``x`` (B, n, d), reusing
        keys/values cached by earlier calls; matches the same rows of a full causal pass."""
        qk_in = x if enc is None else x + enc
        q = self._split(self.wq(qk_in))
        k = self._split(self.wk(qk_in)).data
        v = self._split(self.wv(x)).data
        if "k" in cache:
            k = np.concatenate([cache["k"], k], axis=-2)
            v = np.concatenate([cache["v"], v], axis=-2)
        cache["k"], cache["v"] = k, v
        n, m = x.shape[-2], k.shape[-2]
        scores = (q.data @ np.swapaxes(k, -1, -2)) / np.sqrt(k.shape[-1])
        mask = np.broadcast_to(np.tril(np.ones((n, m), dtype=bool), k=m - n), scores.shape)
        attn = Tensor(F._softmax_np(scores, -1, mask) @ v)
        x = self.norm1(x + self.wo(self._merge(attn)))
        return self.norm2(x + self.ff2(gelu(self.ff1(x))))


class TransformerStack(Module):
    def __init__(self, d: int, heads: int, layers: int, rng: np.random.Generator, ff_mult: int = 4):
        self.layers = [TransformerLayer(d, heads, rng, ff_mult) for _ in range(layers)]

    def __call__(self, x: Tensor, enc: Tensor | None = None, causal: bool = False,
                 key_mask=None) -> Tensor:
        for layer in self.layers:
            x = layer(x, enc=enc, causal=causal, key_mask=key_mask)
        return x

    def step(self, x: Tensor, enc: Tensor | None, caches: list[dict]) -> Tensor:
        for layer, cache in zip(self.layers, caches):
            x = layer.step(x, enc, cache)
        return x


def conv3x3(x: Tensor, lin: Linear) -> Tensor:
    """3×3 same-padded convolution over (N, h, w, c) grids, weights held by ``lin`` (9c -> c_out)."""
    n, h, w, c = x.shape
    xp = pad(x, [(0, 0), (1, 1), (1, 1), (0, 0)])
    taps = [xp[:, i:i + h, j:j + w, :] for i in range(3) for j in range(3)]
    return lin(concat(taps, axis=-1))


def as_default_dtype(arr) -> np.ndarray:
    return np.asarray(arr, dtype=get_default_dtype())
