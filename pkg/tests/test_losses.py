import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from graphvid import losses as L
from graphvid.numerics import Tensor, grad_check, precision
from graphvid.numerics.nn import Parameter

IDENTITY_2X2 = 4 * math.log(1 + math.exp(-1))


@pytest.fixture(autouse=True)
def double():
    with precision("double"):
        yield


def rand(rng, *shape):
    return rng.normal(size=shape)


# --- intra / inter ---------------------------------------------------------

def test_intra_singleton_is_zero(rng):
    assert L.intra_loss(Tensor(rand(rng, 1, 4)), Tensor(rand(rng, 1, 4))).item() == 0.0


def test_intra_equal_similarities():
    T = 5
    g = Tensor(np.ones((T, 3)))
    assert abs(L.intra_loss(g, g).item() - 2 * T * math.log(T)) < 1e-9


def test_intra_identity_pair():
    g = Tensor([[1.0, 0.0], [0.0, 1.0]])
    assert abs(L.intra_loss(g, g).item() - IDENTITY_2X2) < 1e-9
    mpmath.mp.dps = 40
    assert abs(IDENTITY_2X2 - float(4 * mpmath.log(1 + mpmath.exp(-1)))) < 1e-15


def test_intra_zero_norm_rejected():
    with pytest.raises(ValueError, match="zero-norm"):
        L.intra_loss(Tensor(np.zeros((2, 3))), Tensor(np.ones((2, 3))))


def test_inter_single_video_is_zero(rng):
    assert L.inter_loss(Tensor(rand(rng, 1, 3, 4)), Tensor(rand(rng, 1, 3, 4))).item() == 0.0


def test_inter_identity_pair():
    g = Tensor([[[1.0, 0.0]], [[0.0, 1.0]]])
    assert abs(L.inter_loss(g, g).item() - IDENTITY_2X2) < 1e-9


def test_inter_equal_similarities():
    B, T = 3, 4
    g = Tensor(np.ones((B, T, 2)))
    assert abs(L.inter_loss(g, g).item() - 2 * T * B * math.log(B)) < 1e-9


@pytest.mark.parametrize("seed", range(5))
def test_intra_inter_match_literal_oracle(seed):
    rng = np.random.default_rng(seed)
    B, T, d = 3, 4, 5
    g, f = rand(rng, B, T, d), rand(rng, B, T, d)
    ours = L.intra_loss(Tensor(g), Tensor(f)).item()
    ref = sum(oracles.intra(g[b].tolist(), f[b].tolist()) for b in range(B))
    assert abs(ours - ref) < 1e-9
    assert abs(L.inter_loss(Tensor(g), Tensor(f)).item() - oracles.inter(g.tolist(), f.tolist())) < 1e-9


# --- visual context / matching --------------------------------------------

def test_visual_context_single_region(rng):
    e, r = rand(rng, 3, 4), rand(rng, 1, 4)
    c = L.visual_context(Tensor(e), Tensor(r)).data
    assert np.allclose(c, np.repeat(r, 3, axis=0), atol=1e-15)


def test_visual_context_single_embedding_is_region_mean(rng):
    e, r = rand(rng, 1, 4), rand(rng, 6, 4)
    c = L.visual_context(Tensor(e), Tensor(r)).data
    assert np.allclose(c[0], r.mean(axis=0), atol=1e-12)


def test_visual_context_matches_two_loop_oracle(rng):
    e, r = rand(rng, 2, 5), rand(rng, 3, 5)
    c = L.visual_context(Tensor(e), Tensor(r)).data
    assert np.allclose(c, oracles.visual_context(e.tolist(), r.tolist()), atol=1e-12)


def test_matching_score_parallel_and_orthogonal(rng):
    r = rand(rng, 4, 3)
    c = r.mean(axis=0)
    e_par = Tensor(2.0 * c[None])
    fm = Tensor(r.reshape(2, 2, 3))
    assert abs(L.matching_score(L.GraphFramePair(e_par, fm)).item() - 1.0) < 1e-12
    orth = np.cross(c, rng.normal(size=3))
    s = L.matching_score(L.GraphFramePair(Tensor(orth[None]), fm)).item()
    assert abs(s) < 1e-12


def test_matching_score_two_embeddings_oracle(rng):
    e, r = rand(rng, 2, 4), rand(rng, 6, 4)
    s = L.matching_score(L.GraphFramePair(Tensor(e), Tensor(r.reshape(2, 3, 4)))).item()
    assert abs(s - oracles.matching_score(e.tolist(), r.tolist())) < 1e-12


# --- fine-grained ----------------------------------------------------------

def test_finegrain_single_pair_is_zero(rng):
    pair = L.GraphFramePair(Tensor(rand(rng, 3, 4)), Tensor(rand(rng, 2, 2, 4)))
    assert L.finegrain_loss([pair]).item() == 0.0


def test_finegrain_from_scores_identities():
    S = Tensor(np.eye(2))
    assert abs(L.finegrain_loss_from_scores(S).item() - IDENTITY_2X2) < 1e-9
    P = 4
    assert abs(L.finegrain_loss_from_scores(Tensor(np.full((P, P), 0.3))).item() - 2 * P * math.log(P)) < 1e-9


def test_finegrain_rejects_empty():
    with pytest.raises(ValueError):
        L.finegrain_loss([])


@pytest.mark.parametrize("seed", range(5))
def test_finegrain_matches_literal_oracle_with_ragged_graphs(seed):
    rng = np.random.default_rng(100 + seed)
    sizes = rng.integers(1, 5, size=3)
    graphs = [rand(rng, n, 4) for n in sizes]
    frames = [rand(rng, 2, 2, 4) for _ in sizes]
    pairs = [L.GraphFramePair(Tensor(g), Tensor(f)) for g, f in zip(graphs, frames)]
    ref = oracles.finegrain([g.tolist() for g in graphs], [f.reshape(4, 4).tolist() for f in frames])
    assert abs(L.finegrain_loss(pairs).item() - ref) < 1e-9


def test_finegrain_monotone_in_diagonal_score(rng):
    S = rng.normal(size=(3, 3))
    base = L.finegrain_loss_from_scores(Tensor(S)).item()
    for delta in (0.1, 0.5, 2.0):
        S2 = S.copy()
        S2[1, 1] += delta
        bumped = L.finegrain_loss_from_scores(Tensor(S2)).item()
        assert bumped < base
        base = bumped if delta == 0.1 else base


def test_total_loss_sum():
    assert L.total_loss(1.0, 2.0, 3.0).item() == 6.0
    with pytest.raises(ValueError):
        L.total_loss(1.0, float("nan"), 3.0)


# --- invariants ------------------------------------------------------------

@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 10.0))
def test_losses_nonnegative_and_scale_invariant(seed, scale):
    with precision("double"):
        rng = np.random.default_rng(seed)
        g, f = rand(rng, 2, 3, 4), rand(rng, 2, 3, 4)
        for fn in (L.intra_loss, L.inter_loss):
            a = fn(Tensor(g), Tensor(f)).item()
            b = fn(Tensor(scale * g), Tensor(scale * f)).item()
            assert a >= 0
            assert abs(a - b) < 1e-9 * max(1.0, a)


# --- gradients -------------------------------------------------------------

def test_gradients_of_all_three_losses(rng):
    g = Parameter(rand(rng, 2, 4, 5))
    f = Parameter(rand(rng, 2, 4, 5))
    assert grad_check(lambda: L.intra_loss(g, f), [g, f]) < 1e-4
    assert grad_check(lambda: L.inter_loss(g, f), [g, f]) < 1e-4
    e = Parameter(rand(rng, 3, 4, 5))
    r = Parameter(rand(rng, 3, 4, 5))
    mask = np.array([[1, 1, 0, 0], [1, 1, 1, 1], [1, 0, 0, 0]], dtype=bool)
    assert grad_check(lambda: L.finegrain_loss_from_scores(L.matching_matrix(e, mask, r)), [e, r]) < 1e-4
