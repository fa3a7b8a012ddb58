"""Contrastive graph/frame objectives used to pretrain the scene-graph encoder.

All three losses are symmetric InfoNCE sums over raw cosine or matching
scores (no temperature):

* intra-video: graphs vs frame vectors of the frames of one video,
* inter-video: for each frame index, graphs vs frame vectors across the batch,
* fine-grained: graph-level matching scores between every annotated
  (graph, frame) pair in the batch, built from node/edge embeddings attending
  over frame sub-regions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Tensor, cosine_matrix, log_softmax, logsumexp, softmax
from .numerics.autograd import _lift, broadcast_to, concat, stack, where_const
from .numerics.functional import l2_normalize_rows


@dataclass
class GraphFramePair:
    semantic_embeddings: Tensor  # (N_g, d): node then edge representations
    feature_map: Tensor  # (h, w, d)

    def __post_init__(self):
        if self.semantic_embeddings.shape[0] < 1:
            raise ValueError("a graph/frame pair needs at least one node or edge embedding")


def symmetric_infonce(sim: Tensor) -> Tensor:
    """``-sum_i [log softmax_j sim[j, i] + log softmax_j sim[i, j]]`` summed over leading axes.

    ``sim[..., i, j]`` scores graph ``i`` against frame ``j``.
    """
    n = sim.shape[-1]
    if sim.shape[-2] != n:
        raise ValueError("similarity matrix must be square")
    diag = np.arange(n)
    by_frame = log_softmax(sim, axis=-2)[..., diag, diag]
    by_graph = log_softmax(sim, axis=-1)[..., diag, diag]
    return -(by_frame.sum() + by_graph.sum())


def intra_loss(g: Tensor, f: Tensor) -> Tensor:
    """Graphs vs frames of the same video; ``g``/``f`` are (..., T, d), leading axes summed."""
    if g.shape != f.shape or g.shape[-2] < 1:
        raise ValueError(f"intra_loss needs matching (…, T>=1, d) inputs, got {g.shape} and {f.shape}")
    return symmetric_infonce(cosine_matrix(g, f))


def inter_loss(g: Tensor, f: Tensor) -> Tensor:
    """Per frame index, graphs vs frames across the batch; ``g``/``f`` are (B, T, d)."""
    if g.shape != f.shape or g.ndim != 3 or g.shape[0] < 1 or g.shape[1] < 1:
        raise ValueError(f"inter_loss needs matching (B, T, d) inputs, got {g.shape} and {f.shape}")
    return symmetric_infonce(cosine_matrix(g.swapaxes(0, 1), f.swapaxes(0, 1)))


def visual_context(e: Tensor, r: Tensor, e_mask=None) -> Tensor:
    """Attention of each semantic embedding over frame sub-regions.

    ``e`` is (..., N_g, d), ``r`` is (..., hw, d). The dot products are first
    normalized across the N_g embeddings for each region, and those
    normalized scores are then softmaxed across regions to weight ``r``.
    ``e_mask`` (..., N_g) excludes padded embeddings from the first
    normalization.
    """
    if e.shape[-2] < 1 or r.shape[-2] < 1:
        raise ValueError("visual_context needs at least one embedding and one region")
    dots = e @ r.swapaxes(-1, -2)  # (..., N_g, hw)
    mask = None if e_mask is None else np.asarray(e_mask, dtype=bool)[..., :, None]
    sim_dot = softmax(dots, axis=-2, mask=mask)
    weights = softmax(sim_dot, axis=-1)
    return weights @ r


def _cosine_rows(a: Tensor, b: Tensor, mask=None) -> Tensor:
    if mask is not None:
        m = np.asarray(mask, dtype=bool)[..., None]
        a = where_const(m, a, 1.0)
        b = where_const(m, b, 1.0)
    return (l2_normalize_rows(a, "semantic embedding") * l2_normalize_rows(b, "visual context")).sum(axis=-1)


def matching_scores(e: Tensor, r: Tensor, e_mask=None) -> Tensor:
    """``log sum_i exp(cos(e_i, c_i))`` over the (unmasked) embeddings; broadcasts leading axes."""
    c = visual_context(e, r, e_mask)
    cos = _cosine_rows(_broadcast_like(e, c), c, None if e_mask is None else
                       np.broadcast_to(np.asarray(e_mask, dtype=bool), c.shape[:-1]))
    return logsumexp(cos, axis=-1, mask=None if e_mask is None else
                     np.broadcast_to(np.asarray(e_mask, dtype=bool), cos.shape))


def _broadcast_like(a: Tensor, like: Tensor) -> Tensor:
    return a if a.shape == like.shape else broadcast_to(a, like.shape)


def matching_score(pair: GraphFramePair) -> Tensor:
    fm = pair.feature_map
    r = fm.reshape(fm.shape[0] * fm.shape[1], fm.shape[2])
    return matching_scores(pair.semantic_embeddings, r)


def matching_matrix(e: Tensor, e_mask, r: Tensor) -> Tensor:
    """S[i, j] = S(G_i, F_j) for padded embeddings ``e`` (P, N, d) and regions ``r`` (P, hw, d)."""
    P = e.shape[0]
    if r.shape[0] != P:
        raise ValueError("need one frame per graph")
    mask = np.broadcast_to(np.asarray(e_mask, dtype=bool)[:, None, :], (P, P, e.shape[1]))
    return matching_scores(e.reshape(P, 1, *e.shape[1:]), r.reshape(1, P, *r.shape[1:]), mask)


def finegrain_loss_from_scores(scores: Tensor) -> Tensor:
    return symmetric_infonce(scores)


def pad_pairs(pairs: list[GraphFramePair]) -> tuple[Tensor, np.ndarray, Tensor]:
    """Stack variable-length pairs into (P, N_max, d) embeddings, a mask and (P, hw, d) regions."""
    n_max = max(p.semantic_embeddings.shape[0] for p in pairs)
    d = pairs[0].semantic_embeddings.shape[1]
    rows, mask = [], np.zeros((len(pairs), n_max), dtype=bool)
    for i, p in enumerate(pairs):
        n = p.semantic_embeddings.shape[0]
        mask[i, :n] = True
        e = p.semantic_embeddings
        if n < n_max:
            e = concat([e, _lift(np.ones((n_max - n, d)), e)], axis=0)
        rows.append(e)
    regions = [p.feature_map.reshape(-1, p.feature_map.shape[-1]) for p in pairs]
    return stack(rows), mask, stack(regions)


def finegrain_loss(pairs: list[GraphFramePair]) -> Tensor:
    if not pairs:
        raise ValueError("finegrain_loss needs at least one graph/frame pair")
    e, mask, r = pad_pairs(pairs)
    return finegrain_loss_from_scores(matching_matrix(e, mask, r))


def total_loss(intra, inter, finegrain) -> Tensor:
    """Unweighted sum of the three pretraining losses."""
    parts = [_lift(x) for x in (intra, inter, finegrain)]
    for x in parts:
        if not np.isfinite(x.data).all():
            raise ValueError("pretraining loss term is not finite")
    return parts[0] + parts[1] + parts[2]
