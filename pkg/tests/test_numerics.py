import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from graphvid.numerics import (NonFiniteError, Tensor, TransformerLayer, backward, cross_entropy,
                               grad_check, layer_norm, precision, scaled_dot_attention, softmax_rows)
from graphvid.numerics import autograd as T
from graphvid.numerics import tensorio
from graphvid.numerics.nn import Parameter


# --- softmax ---------------------------------------------------------------

def test_softmax_uniform_and_singleton():
    with precision("double"):
        out = softmax_rows(Tensor([0.0, 0.0, 0.0]))
        assert np.allclose(out.data, [1 / 3] * 3, atol=1e-15)
        assert softmax_rows(Tensor([5.0])).data.tolist() == [1.0]


def test_softmax_large_logits_match_extended_precision():
    with precision("double"):
        out = softmax_rows(Tensor([1000.0, 0.0])).data
    mpmath.mp.dps = 50
    den = mpmath.exp(1000) + mpmath.exp(0)
    ref = [float(mpmath.exp(1000) / den), float(mpmath.exp(0) / den)]
    assert np.all(np.isfinite(out))
    assert abs(out[0] - ref[0]) < 1e-12 and abs(out[1] - ref[1]) < 1e-12


def test_softmax_rejects_empty_rows():
    with pytest.raises(ValueError):
        softmax_rows(Tensor(np.zeros((2, 0))))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 7)),
              elements=st.floats(-1e4, 1e4, allow_nan=False)))
def test_softmax_rows_sum_to_one(x):
    with precision("double"):
        p = softmax_rows(Tensor(x)).data
    assert np.all(p >= 0)
    assert np.allclose(p.sum(axis=-1), 1.0, atol=1e-6)


# --- attention -------------------------------------------------------------

def test_attention_single_token_returns_value(rng):
    with precision("double"):
        q, k, v = (Tensor(rng.normal(size=(1, 4))) for _ in range(3))
        out = scaled_dot_attention(q, k, v)
    assert np.array_equal(out.data, v.data)


def test_attention_sharp_query_selects_first_value(rng):
    with precision("double"):
        K = np.eye(4)
        V = rng.normal(size=(4, 4))
        Q = 50.0 * K[:1]
        out = scaled_dot_attention(Tensor(Q), Tensor(K), Tensor(V)).data
    # direct evaluation: weights exp(25)/(exp(25)+3) on row 0
    w0 = math.exp(25.0) / (math.exp(25.0) + 3.0)
    ref = w0 * V[0] + (1 - w0) / 3 * V[1:].sum(axis=0)
    assert np.allclose(out[0], ref, atol=1e-12)
    assert np.allclose(out[0], V[0], atol=1e-6 * max(1.0, np.abs(V).max()) * 10)


def test_causal_attention_ignores_future_values(rng):
    with precision("double"):
        q, k = Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(3, 4)))
        v = rng.normal(size=(3, 4))
        a = scaled_dot_attention(q, k, Tensor(v), causal_mask=True).data
        v2 = v.copy()
        v2[1] += 10.0
        b = scaled_dot_attention(q, k, Tensor(v2), causal_mask=True).data
    assert np.array_equal(a[0], b[0])
    assert not np.allclose(a[1], b[1])


def test_attention_shape_errors(rng):
    with pytest.raises(ValueError):
        scaled_dot_attention(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4))), Tensor(np.ones((2, 4))))
    with pytest.raises(ValueError):
        scaled_dot_attention(Tensor(np.ones((2, 4))), Tensor(np.ones((3, 4))), Tensor(np.ones((3, 4))),
                             causal_mask=True)


# --- layer norm ------------------------------------------------------------

def test_layer_norm_constant_input_gives_beta(rng):
    with precision("double"):
        gamma, beta = Tensor(rng.normal(size=5)), Tensor(rng.normal(size=5))
        out = layer_norm(Tensor(np.full((3, 5), 2.5)), gamma, beta, eps=1e-5)
    assert np.allclose(out.data, np.broadcast_to(beta.data, (3, 5)), atol=1e-12)


def test_layer_norm_standardized_input_is_fixed_point(rng):
    x = rng.normal(size=(4, 16))
    x = (x - x.mean(-1, keepdims=True)) / x.std(-1, keepdims=True)
    with precision("double"):
        out = layer_norm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16)), eps=1e-12)
    assert np.allclose(out.data, x, atol=1e-4)


def test_layer_norm_gradient(rng):
    with precision("double"):
        x = Parameter(rng.normal(size=(3, 6)))
        g = Parameter(rng.normal(size=6))
        b = Parameter(rng.normal(size=6))
        w = Tensor(rng.normal(size=(3, 6)))
        err = grad_check(lambda: (layer_norm(x, g, b, 1e-5) * w).sum(), [x, g, b], eps=1e-5)
    assert err < 1e-4


# --- transformer layer -----------------------------------------------------

def test_transformer_layer_shapes(rng):
    layer = TransformerLayer(16, 4, rng)
    for n in (1, 3, 7):
        assert layer(Tensor(rng.normal(size=(n, 16)))).shape == (n, 16)


def test_transformer_layer_zero_weights_is_residual(rng):
    layer = TransformerLayer(8, 2, rng)
    for p in layer.parameters():
        p.data[...] = 0.0
    layer.norm1.gamma.data[...] = 1.0
    layer.norm2.gamma.data[...] = 1.0
    x = rng.normal(size=(5, 8))
    x = (x - x.mean(-1, keepdims=True)) / x.std(-1, keepdims=True)
    out = layer(Tensor(x)).data
    assert np.allclose(out, x, atol=1e-4)


def test_transformer_layer_rejects_bad_heads(rng):
    with pytest.raises(ValueError):
        TransformerLayer(10, 4, rng)


@pytest.mark.parametrize("causal", [False, True])
def test_transformer_layer_gradient(rng, causal):
    with precision("double"):
        layer = TransformerLayer(8, 2, rng)
        for p in layer.parameters():
            p.data[...] = rng.normal(0, 0.3, size=p.shape)
        x = Parameter(rng.normal(size=(2, 8)))
        enc = Parameter(rng.normal(size=(2, 8)))
        w = Tensor(rng.normal(size=(2, 8)))
        err = grad_check(lambda: (layer(x, enc=enc, causal=causal) * w).sum(),
                         [x, enc] + layer.parameters(), eps=1e-5)
    assert err < 1e-4


def test_encodings_only_touch_queries_and_keys(rng):
    # single token: attention weight is 1 regardless of q/k, so encodings cannot matter
    layer = TransformerLayer(8, 2, rng)
    x = Tensor(rng.normal(size=(1, 8)))
    a = layer(x).data
    b = layer(x, enc=Tensor(rng.normal(size=(1, 8)))).data
    assert np.allclose(a, b, atol=1e-6)


# --- backward --------------------------------------------------------------

def test_backward_sum_of_squares(rng):
    with precision("double"):
        x = Parameter(rng.normal(size=(3, 2)))
        backward((x * x).sum())
    assert np.allclose(x.grad, 2 * x.data)


def test_backward_softmax_nll_identity(rng):
    with precision("double"):
        logits = Parameter(rng.normal(size=(1, 6)))
        backward(cross_entropy(logits, [2]))
        p = np.exp(logits.data - logits.data.max())
        p /= p.sum()
        expect = p.copy()
        expect[0, 2] -= 1.0
    assert np.allclose(logits.grad, expect, atol=1e-12)


def test_backward_accumulates_over_uses_and_clears_record(rng):
    with precision("double"):
        x = Parameter(rng.normal(size=4))
        y = x * x
        loss = (y + x * 3.0).sum()
        backward(loss)
    assert np.allclose(x.grad, 2 * x.data + 3.0)
    assert loss._parents == () and y._parents == ()


def test_backward_rejects_non_scalar():
    x = Parameter(np.ones(3))
    with pytest.raises(ValueError):
        backward(x * 2.0)


def test_non_finite_is_an_error():
    with pytest.raises(NonFiniteError):
        T.log(Tensor([-1.0]))


def test_forward_is_bit_deterministic(rng):
    layer = TransformerLayer(16, 4, rng)
    x = Tensor(rng.normal(size=(6, 16)))
    assert np.array_equal(layer(x, causal=True).data, layer(x, causal=True).data)


# --- grad_check ------------------------------------------------------------

def test_grad_check_quadratic(rng):
    with precision("double"):
        x = Parameter(rng.normal(size=5))
        A = Tensor(rng.normal(size=(5, 5)))
        err = grad_check(lambda: ((x.reshape(1, 5) @ A) * x.reshape(1, 5)).sum(), [x], eps=1e-4)
    assert err < 1e-8


def test_grad_check_detects_corrupted_adjoint(rng, monkeypatch):
    def bad_exp(a):
        out = np.exp(a.data)
        return T._make(out, (a,), lambda g: (g * out * 1.1,), "exp")

    with precision("double"):
        x = Parameter(rng.normal(size=4))
        err = grad_check(lambda: bad_exp(x).sum(), [x], eps=1e-5)
    assert err > 1e-2


def test_grad_check_validates_eps():
    with pytest.raises(ValueError):
        grad_check(lambda: Tensor(0.0), [], eps=1e-2)


def test_grad_check_rejects_non_finite():
    x = Parameter(np.array([1.0]))
    with pytest.raises(NonFiniteError):
        with T.finite_checks(False):
            grad_check(lambda: (x / 0.0).sum(), [x], eps=1e-5)


# --- files -----------------------------------------------------------------

def test_portable_tensor_round_trip(tmp_path, rng):
    arr = rng.normal(size=(2, 3, 4)).astype(np.float32)
    path = tmp_path / "a.ssgt"
    tensorio.save_tensor(path, arr)
    raw = path.read_bytes()
    assert raw[:4] == b"SSGT"
    assert int.from_bytes(raw[4:8], "little") == 3
    assert np.array_equal(tensorio.load_tensor(path), arr)


def test_portable_tensor_rejects_bad_files():
    with pytest.raises(tensorio.FormatError):
        tensorio.tensor_from_bytes(b"XXXX" + bytes(8))
    good = tensorio.tensor_to_bytes(np.ones((2, 2)))
    with pytest.raises(tensorio.FormatError):
        tensorio.tensor_from_bytes(good[:-3])


def test_latent_file_round_trip(tmp_path):
    idx = np.arange(32).reshape(2, 4, 4) % 64
    tensorio.save_latents(tmp_path / "z.ssgl", idx, 64)
    back, k = tensorio.load_latents(tmp_path / "z.ssgl")
    assert k == 64 and np.array_equal(back, idx)
    with pytest.raises(tensorio.FormatError):
        tensorio.latents_to_bytes(np.array([70]), 64)


def test_checkpoint_write_is_atomic(tmp_path, monkeypatch):
    ckpt = tmp_path / "ckpt"
    tensorio.save_checkpoint(ckpt, {"w": np.ones(3)}, {"kind": "test"})
    calls = {"n": 0}
    real = tensorio.tensor_to_bytes

    def flaky(arr):
        calls["n"] += 1
        if calls["n"] == 2:
            raise KeyboardInterrupt("simulated crash")
        return real(arr)

    monkeypatch.setattr(tensorio, "tensor_to_bytes", flaky)
    with pytest.raises(KeyboardInterrupt):
        tensorio.save_checkpoint(ckpt, {"a": np.zeros(2), "b": np.zeros(2)}, {"kind": "new"})
    tensors, manifest = tensorio.load_checkpoint(ckpt)
    assert manifest["kind"] == "test" and list(tensors) == ["w"]
    assert [p.name for p in tmp_path.iterdir()] == ["ckpt"]
