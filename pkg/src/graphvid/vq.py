"""Toy vector-quantized autoencoder: frames <-> grids of discrete code indices.

The encoder embeds non-overlapping s×s patches and mixes neighbouring cells
with 3×3 convolutions; the decoder mirrors it and maps each cell back to an
s×s pixel block (a transposed convolution whose kernel equals its stride).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .frame_encoder import patchify
from .numerics import Linear, Module, Tensor, gelu, mse, no_grad, straight_through
from .numerics.autograd import _lift
from .numerics.nn import Parameter, conv3x3


@dataclass
class Quantized:
    indices: np.ndarray  # (..., h', w') int
    z_q: Tensor  # straight-through output, value = codebook rows
    codebook_loss: Tensor
    commitment_loss: Tensor


def nearest_codes(z: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    """Index of the Euclidean-nearest codebook row for each last-axis vector; ties -> lowest index."""
    flat = np.asarray(z).reshape(-1, z.shape[-1])
    dist = ((flat[:, None, :] - codebook[None, :, :]) ** 2).sum(axis=-1)
    return dist.argmin(axis=1).reshape(z.shape[:-1])


def quantize(z_e: Tensor, codebook: Tensor) -> Quantized:
    """Nearest-neighbour lookup with a straight-through gradient to ``z_e``.

    codebook loss = mean (sg(z_e) - z_q)^2 trains the codes; commitment loss =
    mean (z_e - sg(z_q))^2 pulls the encoder toward its codes.
    """
    if codebook.shape[0] < 1:
        raise ValueError("codebook is empty")
    idx = nearest_codes(z_e.data, codebook.data)
    z_q = codebook[idx]
    cb_loss = mse(z_q, z_e.detach())
    commit = mse(z_e, z_q.detach())
    return Quantized(idx, straight_through(z_e, z_q.data), cb_loss, commit)


def unpatchify(x: Tensor, P: int, C: int) -> Tensor:
    """(N, h, w, P*P*C) -> (N, h*P, w*P, C); inverse of ``patchify``."""
    N, h, w, _ = x.shape
    x = x.reshape(N, h, w, P, P, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(N, h * P, w * P, C)


class VQAutoencoder(Module):
    def __init__(self, H: int = 16, W: int = 16, C: int = 1, stride: int = 4, K: int = 64,
                 d_z: int = 32, hidden: int = 64, beta: float = 0.25, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        if H % stride or W % stride:
            raise ValueError(f"frame {H}x{W} is not divisible by the downsampling factor {stride}")
        if K < 2:
            raise ValueError("codebook needs at least two codes")
        self.H, self.W, self.C, self.stride, self.K, self.d_z = H, W, C, stride, K, d_z
        self.hidden, self.beta = hidden, beta
        self.h, self.w = H // stride, W // stride
        p = stride * stride * C
        self.enc_in = Linear(p, hidden, rng)
        self.enc_mix = Linear(9 * hidden, hidden, rng)
        self.enc_out = Linear(hidden, d_z, rng)
        self.codebook = Parameter(rng.normal(0.0, 1.0, size=(K, d_z)))
        self.dec_in = Linear(d_z, hidden, rng)
        self.dec_mix = Linear(9 * hidden, hidden, rng)
        self.dec_out = Linear(hidden, p, rng)

    def config(self) -> dict:
        return {"H": self.H, "W": self.W, "C": self.C, "stride": self.stride, "K": self.K,
                "d_z": self.d_z, "hidden": self.hidden, "beta": self.beta}

    def _frames(self, frames) -> Tensor:
        x = frames if isinstance(frames, Tensor) else Tensor(np.asarray(frames))
        if x.ndim == 3:
            x = x.reshape(1, *x.shape)
        if x.shape[1:] != (self.H, self.W, self.C):
            raise ValueError(f"expected frames of shape {(self.H, self.W, self.C)}, got {x.shape[1:]}")
        return x

    def encode_latents(self, frames) -> Tensor:
        """(N, H, W, C) -> pre-quantization grid (N, h', w', d_z)."""
        x = gelu(self.enc_in(patchify(self._frames(frames), self.stride)))
        x = x + gelu(conv3x3(x, self.enc_mix))
        return self.enc_out(x)

    def decode_raw(self, z: Tensor) -> Tensor:
        """Unclipped reconstruction from a (N, h', w', d_z) grid of code vectors."""
        x = gelu(self.dec_in(z))
        x = x + gelu(conv3x3(x, self.dec_mix))
        return unpatchify(self.dec_out(x), self.stride, self.C)

    def quantize(self, z_e: Tensor) -> Quantized:
        return quantize(z_e, self.codebook)

    def encode_indices(self, frames) -> np.ndarray:
        with no_grad():
            return nearest_codes(self.encode_latents(frames).data, self.codebook.data)

    def decode_latents(self, indices) -> np.ndarray:
        """Code grid (N, h', w') or (h', w') -> frames clipped to [0, 1]."""
        idx = np.asarray(indices)
        single = idx.ndim == 2
        if single:
            idx = idx[None]
        if idx.shape[1:] != (self.h, self.w):
            raise ValueError(f"expected a {self.h}x{self.w} latent grid, got {idx.shape[1:]}")
        if idx.size and (idx.min() < 0 or idx.max() >= self.K):
            raise IndexError("latent index outside the codebook")
        with no_grad():
            out = np.clip(self.decode_raw(_lift(self.codebook.data[idx])).data, 0.0, 1.0)
        return out[0] if single else out

    def losses(self, frames) -> dict:
        x = self._frames(frames)
        q = self.quantize(self.encode_latents(x))
        recon = mse(self.decode_raw(q.z_q), x)
        total = recon + q.codebook_loss + self.beta * q.commitment_loss
        return {"loss": total, "recon": recon, "codebook": q.codebook_loss,
                "commitment": q.commitment_loss, "indices": q.indices}

    def reconstruct(self, frames) -> np.ndarray:
        return self.decode_latents(self.encode_indices(frames))
