import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dfnet import tensor as T
from dfnet.dfm import (
    DFeatureSet,
    ScoringBank,
    StackedFeatures,
    aggregate_dfeatures,
    compute_scores,
    dfm_forward,
    stack_features,
    synchronized_update,
    update_scoring_bank,
)
from dfnet.errors import EvalModeUpdateError, NotNormalizedError, ReplicaDivergenceError, ShapeMismatchError
from dfnet.tensor import Tensor, grad_check

from conftest import weighted_sum


def bank_with(weights, momentum=0.5) -> ScoringBank:
    b = ScoringBank(np.shape(weights)[0], np.shape(weights)[1], momentum)
    b.weights.data = np.asarray(weights, dtype=b.weights.dtype)
    return b


def stacked(rows) -> StackedFeatures:
    rows = np.asarray(rows, dtype=np.float64)
    return StackedFeatures(Tensor(rows), rows.shape[0], 1, 1)


def test_identical_rows_give_uniform_scores(f64, rng):
    fa = stacked(np.tile(rng.normal(size=3), (6, 1)))
    s = compute_scores(fa, bank_with(rng.normal(size=(3, 4)))).data
    np.testing.assert_allclose(s, 1 / 6, rtol=1e-12)


def test_two_position_scores(f64):
    s = compute_scores(stacked([[1, 0], [0, 1]]), bank_with([[1.0], [0.0]])).data
    np.testing.assert_allclose(s[:, 0], [0.73106, 0.26894], atol=1e-4)


def test_single_row_scores_are_one(f64, rng):
    s = compute_scores(stacked(rng.normal(size=(1, 3))), bank_with(rng.normal(size=(3, 5)))).data
    np.testing.assert_array_equal(s, np.ones((1, 5)))


def test_scores_channel_mismatch(rng):
    with pytest.raises(ShapeMismatchError):
        compute_scores(stacked(np.zeros((2, 3))), bank_with(np.zeros((4, 2))))


def test_aggregate_identical_rows_fixed_point(f64, rng):
    v = rng.normal(size=4)
    fa = stacked(np.tile(v, (5, 1)))
    scores = T.softmax(Tensor(rng.normal(size=(5, 3))), axis=0)
    np.testing.assert_allclose(aggregate_dfeatures(fa, scores).features.data, np.tile(v, (3, 1)), rtol=1e-12)


def test_aggregate_weighted_sum(f64):
    d = aggregate_dfeatures(stacked([[1, 0], [0, 1]]), Tensor([[0.73106], [0.26894]]))
    np.testing.assert_allclose(d.features.data, [[0.73106, 0.26894]], atol=1e-4)


def test_aggregate_one_hot_selects_row(f64, rng):
    rows = rng.normal(size=(4, 3))
    scores = np.zeros((4, 2))
    scores[2, 0] = scores[1, 1] = 1.0
    d = aggregate_dfeatures(stacked(rows), Tensor(scores)).features.data
    np.testing.assert_array_equal(d, rows[[2, 1]])


def test_aggregate_rejects_unnormalized(f64):
    with pytest.raises(NotNormalizedError):
        aggregate_dfeatures(stacked([[1, 0], [0, 1]]), Tensor([[0.5], [0.6]]))


def test_update_forced_arithmetic():
    b = bank_with([[0.4]])
    update_scoring_bank(b, np.array([[0.8]]))
    np.testing.assert_allclose(b.weights.data, [[0.6]])


def test_update_limits(rng):
    w, d = rng.normal(size=(3, 2)), rng.normal(size=(2, 3))
    b = bank_with(w, momentum=1.0)
    update_scoring_bank(b, d)
    np.testing.assert_allclose(b.weights.data, w.astype(np.float32))
    b = bank_with(w, momentum=0.0)
    update_scoring_bank(b, d)
    np.testing.assert_allclose(b.weights.data, d.T.astype(np.float32))


def test_update_refused_in_eval_mode():
    b = bank_with([[0.4]])
    b.eval()
    with pytest.raises(EvalModeUpdateError):
        update_scoring_bank(b, np.array([[0.8]]))


def test_sync_single_worker_matches_plain_update(rng):
    w, d = rng.normal(size=(3, 2)), rng.normal(size=(2, 3))
    a, b = bank_with(w), bank_with(w)
    update_scoring_bank(a, d)
    synchronized_update([b], [DFeatureSet(Tensor(d))])
    np.testing.assert_array_equal(a.weights.data, b.weights.data)


def test_sync_cancellation(rng):
    w, d = rng.normal(size=(2, 2)), rng.normal(size=(2, 2))
    banks = [bank_with(w), bank_with(w)]
    synchronized_update(banks, [DFeatureSet(Tensor(d)), DFeatureSet(Tensor(-d))])
    for b in banks:
        np.testing.assert_allclose(b.weights.data, 0.5 * w.astype(np.float32), rtol=1e-6)


def test_sync_three_workers():
    banks = [bank_with([[0.0]]) for _ in range(3)]
    synchronized_update(banks, [DFeatureSet(Tensor([[v]])) for v in (0.3, 0.6, 0.9)])
    for b in banks:
        np.testing.assert_allclose(b.weights.data, [[0.3]], rtol=1e-6)
    assert all(np.array_equal(b.weights.data, banks[0].weights.data) for b in banks)


def test_sync_detects_divergence():
    banks = [bank_with([[0.0]]), bank_with([[1e-7]])]
    with pytest.raises(ReplicaDivergenceError):
        synchronized_update(banks, [DFeatureSet(Tensor([[1.0]]))] * 2)


def test_frame_permutation_is_bitwise_invariant(rng):
    frames = [Tensor(rng.normal(size=(3, 4, 8)).astype(np.float32)) for _ in range(5)]
    bank = ScoringBank(8, 6, rng=rng)
    ref = dfm_forward(frames, bank, update=False).features.data
    for perm in ([4, 3, 2, 1, 0], [1, 0, 3, 2, 4], [2, 4, 0, 1, 3]):
        out = dfm_forward([frames[i] for i in perm], bank, update=False).features.data
        assert out.tobytes() == ref.tobytes()


def test_single_frame_equals_direct_scoring(f64, rng):
    f = rng.normal(size=(2, 3, 4))
    bank = bank_with(rng.normal(size=(4, 3)))
    rows = f.reshape(-1, 4)
    logits = rows @ bank.weights.data
    s = np.exp(logits - logits.max(axis=0))
    s /= s.sum(axis=0)
    d = dfm_forward([Tensor(f)], bank, update=False).features.data
    np.testing.assert_allclose(d, s.T @ rows, rtol=1e-12)


def test_two_frame_hand_computation(f64):
    # two 2×2×2 frames, bank of ones (c=2, K=1): score_i ∝ exp(x_i + y_i)
    f1 = np.array([[[1.0, 0.0], [0.0, 0.0]], [[0.5, 0.5], [0.0, 1.0]]])
    f2 = np.array([[[0.0, 0.0], [2.0, -1.0]], [[0.0, -1.0], [1.0, 1.0]]])
    rows = [(1.0, 0.0), (0.0, 0.0), (0.5, 0.5), (0.0, 1.0), (0.0, 0.0), (2.0, -1.0), (0.0, -1.0), (1.0, 1.0)]
    e = [math.exp(x + y) for x, y in rows]
    z = sum(e)
    dx = sum(ei * x for ei, (x, _) in zip(e, rows)) / z
    dy = sum(ei * y for ei, (_, y) in zip(e, rows)) / z
    d = dfm_forward([Tensor(f1), Tensor(f2)], bank_with(np.ones((2, 1))), update=False).features.data
    np.testing.assert_allclose(d, [[dx, dy]], rtol=1e-12)


def test_forward_updates_bank_only_in_train_mode(rng):
    f = [Tensor(rng.normal(size=(2, 2, 3)).astype(np.float32))]
    bank = ScoringBank(3, 2, rng=rng)
    w0 = bank.weights.data.copy()
    d = dfm_forward(f, bank, update=True)
    np.testing.assert_allclose(bank.weights.data, 0.5 * w0 + 0.5 * d.features.data.T, rtol=1e-6)
    bank.eval()
    w1 = bank.weights.data.copy()
    dfm_forward(f, bank, update=True)
    np.testing.assert_array_equal(bank.weights.data, w1)


def test_stack_rejects_mixed_shapes():
    with pytest.raises(ShapeMismatchError):
        stack_features([Tensor(np.zeros((2, 2, 3))), Tensor(np.zeros((2, 3, 3)))])


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(1, 4), st.integers(1, 4), st.integers(1, 64), st.integers(0, 2**31 - 1))
def test_scores_normalized_and_dfeatures_convex(n, h, w, K, seed):
    rng = np.random.default_rng(seed)
    frames = [Tensor(rng.normal(size=(h, w, 5))) for _ in range(n)]
    with T.float64_mode():
        fa = stack_features(frames)
        s = compute_scores(fa, bank_with(rng.normal(size=(5, K)) * 3))
        d = aggregate_dfeatures(fa, s).features.data
    np.testing.assert_allclose(s.data.sum(axis=0), 1.0, atol=1e-6)
    lo, hi = fa.tensor.data.min(axis=0), fa.tensor.data.max(axis=0)
    assert np.all(d >= lo - 1e-5) and np.all(d <= hi + 1e-5)


def test_closed_form_moving_average(rng):
    lam, steps = 0.5, 20
    w0 = rng.normal(size=(3, 2))
    dfeats = [rng.normal(size=(2, 3)) for _ in range(2)]
    banks = [bank_with(w0, lam), bank_with(w0, lam)]
    for _ in range(steps):
        synchronized_update(banks, [[DFeatureSet(Tensor(d))] for d in dfeats])
    expected = lam**steps * w0 + (1 - lam**steps) * np.mean(dfeats, axis=0).T
    np.testing.assert_allclose(banks[0].weights.data, expected, atol=1e-6)


def test_gradients_through_dfm(f64, rng):
    frames = [Tensor(rng.normal(size=(2, 2, 3))) for _ in range(2)]
    bank = bank_with(rng.normal(size=(3, 4)))

    def op(a, b, w):
        bank.weights = w
        return weighted_sum(dfm_forward([a, b], bank, update=False).features)

    assert grad_check(op, [*frames, bank.weights]).passed
