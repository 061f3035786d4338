import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dfnet import tensor as T
from dfnet.atm import AttentionMap
from dfnet.crf import CrfParams, Guidance, build_guidance, mean_field_step, pairwise_kernel, potts, refine_attention
from dfnet.errors import NotNormalizedError, SizeCapExceededError, UpsamplingRequestedError
from dfnet.tensor import Tensor, grad_check

from conftest import weighted_sum


def test_guidance_identity_resize(rng):
    img = rng.random((4, 5, 3)).astype(np.float32)
    np.testing.assert_array_equal(build_guidance(img, 4, 5).image, img)


def test_guidance_constant_image():
    g = build_guidance(np.full((16, 16, 3), 0.3, dtype=np.float32), 2, 2)
    np.testing.assert_allclose(g.image, 0.3, rtol=1e-6)


def test_guidance_block_mean():
    img = np.arange(12, dtype=np.float32).reshape(2, 2, 3) / 12
    g = build_guidance(img, 1, 1)
    np.testing.assert_allclose(g.image[0, 0], img.reshape(4, 3).mean(axis=0), rtol=1e-6)


def test_guidance_refuses_upsampling():
    with pytest.raises(UpsamplingRequestedError):
        build_guidance(np.zeros((4, 4, 3)), 8, 4)


def test_kernel_disabled_is_zero(rng):
    k = pairwise_kernel(Guidance(rng.random((3, 3, 3))), CrfParams(w_appearance=0, w_smoothness=0))
    np.testing.assert_array_equal(k, 0.0)


def test_kernel_adjacent_cells():
    g = Guidance(np.full((1, 2, 3), 0.5))
    k = pairwise_kernel(g, CrfParams(theta_alpha=1, theta_gamma=1, w_appearance=1, w_smoothness=1))
    assert k[0, 0] == 0 and k[1, 1] == 0
    assert abs(k[0, 1] - 2 * math.exp(-0.5)) < 1e-12
    assert abs(k[0, 1] - 1.2131) < 1e-4


def test_kernel_symmetric_zero_diagonal(rng):
    k = pairwise_kernel(Guidance(rng.random((3, 4, 3))), CrfParams())
    np.testing.assert_array_equal(k, k.T)
    np.testing.assert_array_equal(np.diag(k), 0.0)


def test_kernel_size_cap():
    with pytest.raises(SizeCapExceededError):
        pairwise_kernel(Guidance(np.zeros((5, 5, 3))), CrfParams(max_positions=24))


def test_params_validation():
    with pytest.raises(ValueError):
        CrfParams(theta_beta=0)
    with pytest.raises(ValueError):
        CrfParams(w_smoothness=-1)


def test_mean_field_zero_kernel_ignores_q(f64, rng):
    u = Tensor(rng.normal(size=(4, 3)))
    q = T.softmax(Tensor(rng.normal(size=(4, 3))), axis=1)
    out = mean_field_step(q, u, np.zeros((4, 4)), Tensor(potts(3)))
    np.testing.assert_array_equal(out.data, T.softmax(u, axis=-1).data)


def test_mean_field_single_pixel(f64, rng):
    u = Tensor(rng.normal(size=(1, 4)))
    out = mean_field_step(T.softmax(u, axis=1), u, np.zeros((1, 1)), Tensor(potts(4)))
    np.testing.assert_array_equal(out.data, T.softmax(u, axis=-1).data)


def test_mean_field_hand_computation(f64):
    # M=2, K=2, kernel k12 = k21 = 0.5, Potts compatibility
    u = np.array([[1.0, 0.0], [0.0, 2.0]])
    q = np.array([[0.6, 0.4], [0.3, 0.7]])
    # message m_i = Σ_j k_ij q_j; Potts penalty for label l = Σ_{l'≠l} m_il'
    m0, m1 = 0.5 * q[1], 0.5 * q[0]
    pen = np.array([[m0[1], m0[0]], [m1[1], m1[0]]])
    z = u - pen
    expected = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    out = mean_field_step(Tensor(q), Tensor(u), np.array([[0, 0.5], [0.5, 0]]), Tensor(potts(2)))
    np.testing.assert_allclose(out.data, expected, rtol=1e-12)


def test_mean_field_rejects_unnormalized(f64):
    with pytest.raises(NotNormalizedError):
        mean_field_step(Tensor([[0.5, 0.6]]), Tensor([[0.0, 0.0]]), np.zeros((1, 1)), Tensor(potts(2)))


def test_refine_no_iterations_is_softmax(rng):
    P = Tensor(rng.normal(size=(6, 3)).astype(np.float32))
    att = AttentionMap(P, 2, 3)
    out = refine_attention(att, Guidance(rng.random((2, 3, 3))), CrfParams(n_iters=0))
    assert out.data.tobytes() == T.softmax(P, axis=-1).data.tobytes()


def smoothing_setup():
    # 2×2 grid, uniform colour, label 0 favoured at three pixels, label 1 weakly at the last
    P = Tensor(np.array([[2.0, 0.0], [2.0, 0.0], [2.0, 0.0], [0.0, 0.5]]))
    g = Guidance(np.full((2, 2, 3), 0.5))
    params = CrfParams(w_appearance=0.0, w_smoothness=3.0, theta_gamma=2.0)
    return AttentionMap(P, 2, 2), g, params


def test_smoothing_raises_majority_label_at_dissenter(f64):
    att, g, params = smoothing_setup()
    before = T.softmax(att.logits, axis=-1).data[3, 0]
    params.n_iters = 1
    after = refine_attention(att, g, params).data[3, 0]
    assert after > before


def test_smoothing_total_variation_non_increasing(f64):
    att, g, params = smoothing_setup()
    kernel = pairwise_kernel(g, params)
    q = T.softmax(att.logits, axis=-1)
    neighbours = [(0, 1), (0, 2), (1, 3), (2, 3)]

    def tv(q):
        return sum(np.abs(q[i] - q[j]).sum() for i, j in neighbours)

    prev = tv(q.data)
    for _ in range(5):
        q = mean_field_step(q, att.logits, kernel, Tensor(potts(2)))
        cur = tv(q.data)
        assert cur <= prev + 1e-12
        prev = cur


def test_label_permutation_symmetry(f64, rng):
    P = rng.normal(size=(6, 4))
    compat = rng.random((4, 4))
    g = Guidance(rng.random((2, 3, 3)))
    params = CrfParams(n_iters=3)
    perm = np.array([2, 0, 3, 1])
    out = refine_attention(AttentionMap(Tensor(P), 2, 3), g, params, Tensor(compat)).data
    outp = refine_attention(AttentionMap(Tensor(P[:, perm]), 2, 3), g, params, Tensor(compat[np.ix_(perm, perm)])).data
    np.testing.assert_allclose(outp, out[:, perm], rtol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_iterates_stay_stochastic(h, w, K, seed):
    rng = np.random.default_rng(seed)
    with T.float64_mode():
        att = AttentionMap(Tensor(rng.normal(size=(h * w, K)) * 5), h, w)
        out = refine_attention(att, Guidance(rng.random((h, w, 3))), CrfParams(n_iters=5)).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)


def test_gradients_through_three_iterations(f64, rng):
    P = Tensor(rng.normal(size=(6, 3)))
    compat = Tensor(potts(3) + 0.1 * rng.normal(size=(3, 3)))
    g = Guidance(rng.random((2, 3, 3)))
    params = CrfParams(n_iters=3)

    def op(P, compat):
        return weighted_sum(refine_attention(AttentionMap(P, 2, 3), g, params, compat))

    assert grad_check(op, [P, compat]).passed
