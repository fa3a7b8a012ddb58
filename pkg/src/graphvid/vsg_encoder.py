"""Two-stage video scene-graph encoder.

The spatial stage reads one linearized graph (context token, nodes, edges) and
returns the context vector plus node/edge representations. The temporal stage
places the given contexts on a length-T timeline, fills the other frames with a
learned mask embedding and infers one representation per frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Module, Tensor, TransformerStack, concat
from .numerics.autograd import _lift
from .numerics.nn import normal_init
from .scenegraph import (GraphTrack, TokenSequence, Vocabulary, encoding_rows,
                         extended_encoding_table, linearize)


@dataclass
class SpatialOutput:
    context: Tensor  # (d,)
    node_edge_reps: Tensor  # (N_n + N_e, d)


@dataclass
class GraphRepresentations:
    reps: Tensor  # (T, d)


@dataclass
class SpatialBatch:
    """Padded spatial outputs for G graphs: ``outputs`` (G, L, d), ``mask`` (G, L)."""

    outputs: Tensor
    mask: np.ndarray

    @property
    def contexts(self) -> Tensor:
        return self.outputs[:, 0, :]

    @property
    def semantic(self) -> tuple[Tensor, np.ndarray]:
        """Node/edge representations (G, L-1, d) and their validity mask."""
        return self.outputs[:, 1:, :], self.mask[:, 1:]


@dataclass
class TrackBatch:
    reps: Tensor  # (B, T, d)
    spatial: SpatialBatch
    given: list  # (video index, frame index) for each spatial row


class VSGEncoder(Module):
    def __init__(self, vocab: Vocabulary, d: int = 32, spatial_layers: int = 2, temporal_layers: int = 2,
                 heads: int = 4, max_nodes: int = 5, T: int = 8, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.vocab, self.d, self.max_nodes, self.T = vocab, d, max_nodes, T
        self.token_embed = normal_init(rng, (vocab.num_tokens, d))
        self.node_enc = normal_init(rng, (max_nodes, d))
        self.context_enc = normal_init(rng, (d,))
        self.spatial = TransformerStack(d, heads, spatial_layers, rng)
        self.mask_embed = normal_init(rng, (d,))
        self.temporal_enc = normal_init(rng, (T, d))
        self.temporal = TransformerStack(d, heads, temporal_layers, rng)

    def config(self) -> dict:
        return {"d": self.d, "spatial_layers": len(self.spatial.layers),
                "temporal_layers": len(self.temporal.layers), "heads": self.spatial.layers[0].heads,
                "max_nodes": self.max_nodes, "T": self.T, "vocab": self.vocab.to_dict()}

    # --- spatial ------------------------------------------------------------

    def encoding_table(self) -> Tensor:
        return extended_encoding_table(self.node_enc, self.context_enc)

    def encode_tokens(self, token_ids: np.ndarray, enc: Tensor, key_mask=None) -> Tensor:
        """Spatial transformer over explicit tokens (…, L) and per-token encodings (…, L, d)."""
        x = self.token_embed[np.asarray(token_ids)]
        return self.spatial(x, enc=enc, key_mask=key_mask)

    def encode_spatial(self, seq: TokenSequence) -> SpatialOutput:
        plus, minus = encoding_rows(seq, self.max_nodes)
        table = self.encoding_table()
        out = self.encode_tokens(seq.token_ids, table[plus] - table[minus])
        return SpatialOutput(out[0], out[1:])

    def encode_spatial_batch(self, seqs: list[TokenSequence]) -> SpatialBatch:
        G, L = len(seqs), max(len(s) for s in seqs)
        pad_row = self.max_nodes + 1
        tokens = np.zeros((G, L), dtype=np.int64)
        plus = np.full((G, L), pad_row, dtype=np.int64)
        minus = np.full((G, L), pad_row, dtype=np.int64)
        mask = np.zeros((G, L), dtype=bool)
        for i, s in enumerate(seqs):
            n = len(s)
            tokens[i, :n] = s.token_ids
            plus[i, :n], minus[i, :n] = encoding_rows(s, self.max_nodes)
            mask[i, :n] = True
        table = self.encoding_table()
        out = self.encode_tokens(tokens, table[plus] - table[minus], key_mask=mask)
        return SpatialBatch(out, mask)

    # --- temporal -------------------------------------------------------------

    def encode_timeline(self, contexts: Tensor, slots: np.ndarray, T: int | None = None) -> Tensor:
        """``contexts`` (G, d) are placed at ``slots`` (B, T) (row index, or -1 for a masked frame)."""
        slots = np.asarray(slots, dtype=np.int64)
        T = slots.shape[-1] if T is None else T
        if T > self.T:
            raise ValueError(f"video length {T} exceeds the trained length {self.T}")
        if slots.shape[-1] != T:
            raise ValueError("slot map width must equal T")
        G = contexts.shape[0]
        given = slots >= 0
        if not given.any(axis=-1).all():
            raise ValueError("every video needs at least one given graph context")
        rows = np.where(given, slots, G)
        padded = concat([contexts, _lift(np.zeros((1, self.d)), contexts)], axis=0)
        masked = _lift((~given)[..., None].astype(contexts.data.dtype), contexts)
        x = padded[rows] + masked * self.mask_embed
        return self.temporal(x, enc=self.temporal_enc[:T])

    def encode_temporal(self, contexts: dict, T: int) -> GraphRepresentations:
        if not contexts:
            raise ValueError("encode_temporal needs at least one given context")
        keys = sorted(contexts)
        if keys[0] < 0 or keys[-1] >= T:
            raise ValueError(f"context frame index outside [0, {T})")
        slots = np.full((1, T), -1, dtype=np.int64)
        for i, t in enumerate(keys):
            slots[0, t] = i
        stacked = concat([contexts[t].reshape(1, self.d) for t in keys], axis=0)
        return GraphRepresentations(self.encode_timeline(stacked, slots, T)[0])

    # --- tracks ---------------------------------------------------------------

    def encode_track(self, track: GraphTrack) -> tuple[GraphRepresentations, dict]:
        spatial = {t: self.encode_spatial(linearize(g, self.vocab)) for t, g in sorted(track.entries.items())}
        reps = self.encode_temporal({t: s.context for t, s in spatial.items()}, track.length)
        return reps, spatial

    def encode_tracks(self, tracks: list[GraphTrack]) -> TrackBatch:
        T = tracks[0].length
        if any(tr.length != T for tr in tracks):
            raise ValueError("all tracks in a batch must share a length")
        seqs, given = [], []
        slots = np.full((len(tracks), T), -1, dtype=np.int64)
        for b, tr in enumerate(tracks):
            for t in tr.frames():
                slots[b, t] = len(seqs)
                seqs.append(linearize(tr.entries[t], self.vocab))
                given.append((b, t))
        sb = self.encode_spatial_batch(seqs)
        return TrackBatch(self.encode_timeline(sb.contexts, slots, T), sb, given)

