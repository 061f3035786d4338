import numpy as np
import pytest

from dfnet import tensor as T
from dfnet.atm import AttentionParams, attention_logits, reconstruct_features
from dfnet.dfm import DFeatureSet
from dfnet.encoder import FeatureMap
from dfnet.errors import NotNormalizedError, ShapeMismatchError
from dfnet.tensor import Tensor, grad_check

from conftest import weighted_sum


def params_with(w) -> AttentionParams:
    p = AttentionParams(np.shape(w)[0])
    p.w_att.data = np.asarray(w, dtype=p.w_att.dtype)
    return p


def test_identity_form_is_dot_product(f64, rng):
    f = rng.normal(size=(2, 3, 4))
    d = rng.normal(size=(5, 4))
    P = attention_logits(FeatureMap(Tensor(f)), DFeatureSet(Tensor(d)), params_with(np.eye(4))).logits.data
    np.testing.assert_allclose(P, f.reshape(6, 4) @ d.T, rtol=1e-12)


def test_zero_features_give_zero_logits(rng):
    P = attention_logits(Tensor(np.zeros((2, 2, 3))), DFeatureSet(Tensor(rng.normal(size=(4, 3)))), AttentionParams(3))
    np.testing.assert_array_equal(P.logits.data, 0.0)


def test_dot_product_value():
    P = attention_logits(Tensor([[[1.0, 2.0]]]), DFeatureSet(Tensor([[3.0, 4.0]])), params_with(np.eye(2)))
    assert P.logits.data[0, 0] == 11.0 and (P.M, P.K) == (1, 1)


def test_channel_mismatch():
    with pytest.raises(ShapeMismatchError):
        attention_logits(Tensor(np.zeros((2, 2, 3))), DFeatureSet(Tensor(np.zeros((2, 4)))), AttentionParams(3))


def test_identity_plus_small_noise_init():
    w = AttentionParams(16, np.random.default_rng(0)).w_att.data
    off = w - np.eye(16)
    assert 0 < np.abs(off).max() < 0.1


def test_bilinearity(f64, rng):
    f, d1, d2 = rng.normal(size=(2, 2, 3)), rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    p = params_with(rng.normal(size=(3, 3)))
    base = attention_logits(Tensor(f), DFeatureSet(Tensor(d1)), p).logits.data
    scaled = attention_logits(Tensor(2.0 * f), DFeatureSet(Tensor(d1)), p).logits.data
    np.testing.assert_array_equal(scaled, 2.0 * base)
    summed = attention_logits(Tensor(f), DFeatureSet(Tensor(d1 + d2)), p).logits.data
    other = attention_logits(Tensor(f), DFeatureSet(Tensor(d2)), p).logits.data
    np.testing.assert_allclose(summed, base + other, atol=1e-5)


def test_reconstruct_single_label(rng):
    d = rng.normal(size=(1, 3)).astype(np.float32)
    out = reconstruct_features(Tensor(np.ones((4, 1))), DFeatureSet(Tensor(d)), 2, 2).tensor.data
    np.testing.assert_array_equal(out, np.broadcast_to(d[0], (2, 2, 3)))


def test_reconstruct_uniform_gives_mean(f64, rng):
    d = rng.normal(size=(4, 3))
    out = reconstruct_features(Tensor(np.full((6, 4), 0.25)), DFeatureSet(Tensor(d)), 2, 3).tensor.data
    np.testing.assert_allclose(out, np.broadcast_to(d.mean(axis=0), (2, 3, 3)), rtol=1e-12)


def test_reconstruct_weighted_value():
    out = reconstruct_features(Tensor([[0.25, 0.75]]), DFeatureSet(Tensor([[4.0, 0.0], [0.0, 4.0]])), 1, 1)
    np.testing.assert_array_equal(out.tensor.data[0, 0], [1.0, 3.0])


def test_reconstruct_rejects_unnormalized():
    with pytest.raises(NotNormalizedError):
        reconstruct_features(Tensor([[0.5, 0.6]]), DFeatureSet(Tensor(np.eye(2))), 1, 1)


def test_reconstruct_convex_hull(f64, rng):
    d = rng.normal(size=(5, 4))
    q = T.softmax(Tensor(rng.normal(size=(9, 5)) * 4), axis=1)
    out = reconstruct_features(q, DFeatureSet(Tensor(d)), 3, 3).tensor.data.reshape(9, 4)
    assert np.all(out >= d.min(axis=0) - 1e-5) and np.all(out <= d.max(axis=0) + 1e-5)


def test_k1_composition_is_constant(f64, rng):
    f = rng.normal(size=(3, 3, 4))
    d = DFeatureSet(Tensor(rng.normal(size=(1, 4))))
    P = attention_logits(Tensor(f), d, params_with(rng.normal(size=(4, 4))))
    out = reconstruct_features(T.softmax(P.logits, axis=-1), d, 3, 3).tensor.data
    np.testing.assert_array_equal(out, np.broadcast_to(d.features.data[0], out.shape))


def test_gradients(f64, rng):
    f, d = Tensor(rng.normal(size=(2, 2, 3))), Tensor(rng.normal(size=(4, 3)))
    p = params_with(rng.normal(size=(3, 3)))

    def op(f, d, w):
        p.w_att = w
        P = attention_logits(f, DFeatureSet(d), p)
        return weighted_sum(reconstruct_features(T.softmax(P.logits, axis=-1), DFeatureSet(d), 2, 2).tensor)

    assert grad_check(op, [f, d, p.w_att]).passed
