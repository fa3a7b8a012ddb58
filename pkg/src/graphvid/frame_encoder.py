"""Patch-based frame encoder: an h×w grid of sub-region vectors and a pooled frame vector."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Linear, Module, Tensor, TransformerStack
from .numerics.nn import normal_init


@dataclass
class FrameFeatures:
    feature_map: Tensor  # (..., h, w, d)
    frame_vector: Tensor  # (..., d)


def patchify(frames: np.ndarray | Tensor, P: int) -> Tensor:
    """(N, H, W, C) -> (N, H/P, W/P, P*P*C) non-overlapping patches, row-major inside each patch."""
    x = frames if isinstance(frames, Tensor) else Tensor(frames)
    N, H, W, C = x.shape
    if H % P or W % P:
        raise ValueError(f"frame {H}x{W} is not divisible by patch size {P}")
    x = x.reshape(N, H // P, P, W // P, P, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(N, H // P, W // P, P * P * C)


class FrameEncoder(Module):
    """Patch embedding, transformer mixing with learned 2D positions on queries/keys,
    then mean pooling and a linear map for the frame vector."""

    def __init__(self, H: int = 16, W: int = 16, C: int = 1, patch: int = 4, d: int = 32,
                 layers: int = 2, heads: int = 4, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        if H % patch or W % patch:
            raise ValueError(f"frame {H}x{W} is not divisible by patch size {patch}")
        self.H, self.W, self.C, self.patch, self.d = H, W, C, patch, d
        self.h, self.w = H // patch, W // patch
        self.embed = Linear(patch * patch * C, d, rng)
        self.pos = normal_init(rng, (self.h * self.w, d))
        self.mixer = TransformerStack(d, heads, layers, rng)
        self.pool = Linear(d, d, rng)

    def config(self) -> dict:
        return {"H": self.H, "W": self.W, "C": self.C, "patch": self.patch, "d": self.d,
                "layers": len(self.mixer.layers), "heads": self.mixer.layers[0].heads}

    def __call__(self, frames) -> FrameFeatures:
        """``frames`` is (N, H, W, C) or a single (H, W, C) frame."""
        x = frames if isinstance(frames, Tensor) else Tensor(np.asarray(frames))
        single = x.ndim == 3
        if single:
            x = x.reshape(1, *x.shape)
        if x.shape[1:] != (self.H, self.W, self.C):
            raise ValueError(f"expected frames of shape {(self.H, self.W, self.C)}, got {x.shape[1:]}")
        N = x.shape[0]
        tokens = self.embed(patchify(x, self.patch)).reshape(N, self.h * self.w, self.d)
        tokens = self.mixer(tokens, enc=self.pos)
        fmap = tokens.reshape(N, self.h, self.w, self.d)
        vec = self.pool(tokens.mean(axis=1))
        if single:
            return FrameFeatures(fmap.reshape(self.h, self.w, self.d), vec.reshape(self.d))
        return FrameFeatures(fmap, vec)


def encode_frame(frame, encoder: FrameEncoder) -> FrameFeatures:
    return encoder(frame)
