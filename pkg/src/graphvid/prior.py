"""Autoregressive transformer prior over code indices with injected graph representations.

Sequence layouts (T frames, n cells per frame), always starting with the
learned empty embedding z0:

* order 1: z0, g_1, z_1,1..z_1,n, g_2, z_2,1.., ...
* order 2: z0, z_1,1..z_1,n, g_1, z_2,1.., g_2, ...
* order 3: z0, g_1..g_T, z_1,1..z_T,n

Latent positions carry learned temporal (per frame) and cell encodings, added
to queries and keys only. Logits at position p predict the latent at p+1.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .numerics import Linear, Module, Tensor, TransformerStack, concat, cross_entropy, mse, no_grad
from .numerics.autograd import _lift
from .numerics.nn import normal_init

EMPTY, GRAPH, LATENT = 0, 1, 2
ORDERS = (1, 2, 3)


@dataclass(frozen=True)
class SequenceLayout:
    """Where each canonical item ([z0, g_1..g_T, z_1,1..z_T,n]) lands in the ordered sequence."""

    order: int
    T: int
    cells: int
    perm: np.ndarray  # sequence position -> canonical index
    roles: np.ndarray  # (L,) EMPTY / GRAPH / LATENT
    frames: np.ndarray  # (L,) frame index, -1 for z0
    cell_ids: np.ndarray  # (L,) cell index, -1 unless latent

    @property
    def length(self) -> int:
        return len(self.perm)

    @property
    def latent_positions(self) -> np.ndarray:
        """Sequence positions of latents in (frame, cell) row-major order."""
        pos = np.empty(self.T * self.cells, dtype=np.int64)
        lat = self.roles == LATENT
        pos[self.perm[lat] - 1 - self.T] = np.nonzero(lat)[0]
        return pos

    @property
    def graph_positions(self) -> np.ndarray:
        pos = np.empty(self.T, dtype=np.int64)
        gr = self.roles == GRAPH
        pos[self.perm[gr] - 1] = np.nonzero(gr)[0]
        return pos


@lru_cache(maxsize=None)
def sequence_layout(order: int, T: int, cells: int) -> SequenceLayout:
    if order not in ORDERS:
        raise ValueError(f"insertion order must be one of {ORDERS}, got {order}")
    g = [1 + t for t in range(T)]
    z = [[1 + T + t * cells + c for c in range(cells)] for t in range(T)]
    seq = [0]
    if order == 1:
        for t in range(T):
            seq += [g[t]] + z[t]
    elif order == 2:
        for t in range(T):
            seq += z[t] + [g[t]]
    else:
        seq += g + [i for row in z for i in row]
    perm = np.array(seq, dtype=np.int64)
    roles = np.where(perm == 0, EMPTY, np.where(perm <= T, GRAPH, LATENT))
    frames = np.where(roles == GRAPH, perm - 1, np.where(roles == LATENT, (perm - 1 - T) // cells, -1))
    cell_ids = np.where(roles == LATENT, (perm - 1 - T) % cells, -1)
    for arr in (perm, roles, frames, cell_ids):
        arr.setflags(write=False)
    return SequenceLayout(order, T, cells, perm, roles, frames, cell_ids)


@dataclass
class PriorSequence:
    embeddings: Tensor  # (B, L, d_m)
    encodings: Tensor  # (L, d_m), zero outside latent positions
    layout: SequenceLayout


@dataclass
class PriorOutput:
    nll: Tensor
    graph_mse: Tensor
    logits: Tensor  # (B, T*cells, K), row r predicts latent r


class PriorModel(Module):
    def __init__(self, K: int = 64, d_graph: int = 32, d_model: int = 128, layers: int = 4, heads: int = 4,
                 T: int = 8, cells: int = 16, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.K, self.d_graph, self.d_model, self.T, self.cells = K, d_graph, d_model, T, cells
        self.empty = normal_init(rng, (d_model,))
        self.code_embed = normal_init(rng, (K, d_model))
        self.graph_proj = Linear(d_graph, d_model, rng)
        self.temporal_enc = normal_init(rng, (T, d_model))
        self.cell_enc = normal_init(rng, (cells, d_model))
        self.body = TransformerStack(d_model, heads, layers, rng)
        self.head = Linear(d_model, K, rng)
        self.graph_head = Linear(d_model, d_graph, rng)

    def config(self) -> dict:
        return {"K": self.K, "d_graph": self.d_graph, "d_model": self.d_model, "T": self.T,
                "cells": self.cells, "layers": len(self.body.layers), "heads": self.body.layers[0].heads}

    def build_sequence(self, latents, graph_reps: Tensor, order: int) -> PriorSequence:
        """``latents`` (B, T, cells) code indices, ``graph_reps`` (B, T, d_graph)."""
        lat = np.asarray(latents, dtype=np.int64)
        if lat.ndim == 2:
            lat = lat[None]
        reps = graph_reps if isinstance(graph_reps, Tensor) else Tensor(np.asarray(graph_reps))
        if reps.ndim == 2:
            reps = reps.reshape(1, *reps.shape)
        B, T, n = lat.shape
        if reps.shape[:2] != (B, T):
            raise ValueError(f"need one graph representation per frame: latents {lat.shape}, reps {reps.shape}")
        if T > self.T or n != self.cells:
            raise ValueError(f"latent grid {T}x{n} does not fit the model ({self.T}x{self.cells})")
        if lat.size and (lat.min() < 0 or lat.max() >= self.K):
            raise IndexError("latent index outside the codebook")
        layout = sequence_layout(order, T, n)
        z0 = self.empty.reshape(1, 1, self.d_model) * _lift(np.ones((B, 1, 1)), self.empty)
        canon = concat([z0, self.graph_proj(reps), self.code_embed[lat.reshape(B, T * n)]], axis=1)
        lat_enc = self.temporal_enc[np.repeat(np.arange(T), n)] + self.cell_enc[np.tile(np.arange(n), T)]
        enc = concat([_lift(np.zeros((1 + T, self.d_model)), lat_enc), lat_enc], axis=0)
        return PriorSequence(canon[:, layout.perm], enc[layout.perm], layout)

    def hidden(self, seq: PriorSequence, upto: int | None = None) -> Tensor:
        x, enc = seq.embeddings, seq.encodings
        if upto is not None:
            x, enc = x[:, :upto], enc[:upto]
        return self.body(x, enc=enc, causal=True)

    def forward(self, latents, graph_reps: Tensor, order: int, graph_weight=None) -> PriorOutput:
        """Teacher-forced nll over every latent cell and graph-position reconstruction mse.

        ``graph_weight`` (B,) optionally excludes sequences (weight 0) from the mse.
        """
        reps = graph_reps if isinstance(graph_reps, Tensor) else Tensor(np.asarray(graph_reps))
        seq = self.build_sequence(latents, reps, order)
        lat = np.asarray(latents, dtype=np.int64).reshape(seq.embeddings.shape[0], -1)
        h = self.hidden(seq)
        logits = self.head(h[:, seq.layout.latent_positions - 1])
        nll = cross_entropy(logits, lat)
        g_out = self.graph_head(h[:, seq.layout.graph_positions])
        target = reps.reshape(*g_out.shape).detach()
        if graph_weight is None:
            gm = mse(g_out, target)
        else:
            w = np.asarray(graph_weight, dtype=np.float64)
            if w.sum() <= 0:
                gm = _lift(np.zeros(()), g_out)
            else:
                diff = g_out - target
                per = (diff * diff).mean(axis=(1, 2))
                gm = (per * _lift(w / w.sum(), per)).sum()
        return PriorOutput(nll, gm, logits)

    def next_logits(self, seq: PriorSequence, position: int) -> np.ndarray:
        """Logits (B, K) for the latent at sequence ``position``, using inputs before it only."""
        with no_grad():
            h = self.hidden(seq, upto=position)
            return self.head(h[:, position - 1]).data


def _draw(logits: np.ndarray, rng: np.random.Generator, temperature: float, top_k: int | None) -> int:
    z = np.asarray(logits, dtype=np.float64) / temperature
    if top_k is not None and top_k < len(z):
        cut = np.partition(z, -top_k)[-top_k]
        z = np.where(z >= cut, z, -np.inf)
    p = np.exp(z - z.max())
    cdf = np.cumsum(p)
    return int(min(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"), len(z) - 1))


def sample_future(model: PriorModel, start_latents, graph_reps, order: int = 1, temperature: float = 1.0,
                  seed=0, top_k: int | None = None) -> np.ndarray:
    """Ancestral sampling of frames 1..T-1 given frame-0 codes.

    ``start_latents`` is (cells,) or (B, cells); ``graph_reps`` is (T, d) or
    (B, T, d). ``seed`` is one seed or one per video; every video draws from
    its own generator. Returns (T, cells) or (B, T, cells) indices.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    start = np.asarray(start_latents, dtype=np.int64)
    reps = np.asarray(graph_reps.data if isinstance(graph_reps, Tensor) else graph_reps)
    single = start.ndim == 1
    if single:
        start, reps = start[None], reps[None]
    B, n = start.shape
    T = reps.shape[1]
    seeds = np.broadcast_to(np.asarray(seed), (B,)) if np.ndim(seed) == 0 else np.asarray(seed)
    if len(seeds) != B:
        raise ValueError("need one seed per video")
    gens = [np.random.default_rng(int(s)) for s in seeds]
    lat = np.zeros((B, T, n), dtype=np.int64)
    lat[:, 0] = start
    with no_grad():
        seq = model.build_sequence(lat, Tensor(reps), order)
        x = seq.embeddings.data.copy()
        enc = seq.encodings.data
        pos = seq.layout.latent_positions.reshape(T, n)
        caches = [{} for _ in model.body.layers]
        fed, h = 0, None
        for t in range(1, T):
            for c in range(n):
                q = int(pos[t, c])
                h = model.body.step(Tensor(x[:, fed:q]), Tensor(enc[fed:q]), caches)
                fed = q
                logits = model.head(h[:, -1]).data
                for b in range(B):
                    lat[b, t, c] = _draw(logits[b], gens[b], temperature, top_k)
                x[:, q] = model.code_embed.data[lat[:, t, c]]
    return lat[0] if single else lat
