"""Discriminative feature module.

Every feature position of every frame in a group is scored by K scoring
vectors; a softmax over positions turns each score column into weights, and
the K discriminative features are the corresponding weighted sums of the
positional features. The scoring vectors are refreshed after every training
step by a moving average towards the latest discriminative features.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from dfnet import tensor as T
from dfnet.encoder import FeatureMap
from dfnet.errors import (
    EvalModeUpdateError,
    NotNormalizedError,
    ReplicaDivergenceError,
    ShapeMismatchError,
)
from dfnet.nn import Module, Parameter, kaiming_normal
from dfnet.tensor import Tensor


@dataclass
class StackedFeatures:
    """All positional features of a group as one (N·h·w)×c matrix."""

    tensor: Tensor
    n_frames: int
    h: int
    w: int

    def __post_init__(self):
        if self.tensor.shape[0] != self.n_frames * self.h * self.w:
            raise ShapeMismatchError(
                f"stacked features have {self.tensor.shape[0]} rows, expected "
                f"{self.n_frames}·{self.h}·{self.w}"
            )

    @property
    def c(self) -> int:
        return self.tensor.shape[1]


@dataclass
class DFeatureSet:
    features: Tensor  # K×c

    @property
    def K(self) -> int:
        return self.features.shape[0]

    @property
    def c(self) -> int:
        return self.features.shape[1]


class ScoringBank(Module):
    """The c×K scoring weights; column k scores positions for D-feature k.

    Gradients reach the weights through the scoring softmax, but the gradient
    optimizer skips them: they change only through the moving-average rule.
    """

    def __init__(self, channels: int, K: int, momentum: float = 0.5, rng: np.random.Generator | None = None):
        super().__init__()
        if not 0.0 <= momentum <= 1.0:
            raise ValueError(f"momentum must lie in [0, 1], got {momentum}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.momentum = momentum
        self.weights = Parameter(kaiming_normal(rng, (channels, K), channels), optimize=False)

    @property
    def train_mode(self) -> bool:
        return self.training

    @property
    def K(self) -> int:
        return self.weights.shape[1]

    @property
    def c(self) -> int:
        return self.weights.shape[0]


def _canonical_frame_order(frames: np.ndarray) -> list[int]:
    # byte content is a total order independent of the caller's frame order
    return sorted(range(frames.shape[0]), key=lambda i: frames[i].tobytes())


def stack_features(features) -> StackedFeatures:
    """Concatenate frame features into the (N·h·w)×c matrix.

    Accepts a list of FeatureMaps, a list of h×w×c tensors, or one N×h×w×c
    tensor. Frames are put into a canonical order (by content), so anything
    reduced over the rows is bitwise-independent of the input frame order.
    """
    if isinstance(features, Tensor):
        stacked = features if features.ndim == 4 else T.reshape(features, (1,) + features.shape)
    else:
        tensors = [f.tensor if isinstance(f, FeatureMap) else T.as_tensor(f) for f in features]
        if not tensors:
            raise ShapeMismatchError("dfm needs at least one feature map")
        shape = tensors[0].shape
        for t in tensors:
            if t.ndim != 3 or t.shape != shape:
                raise ShapeMismatchError(f"feature maps must share one h×w×c shape, got {t.shape} and {shape}")
        stacked = T.concat([T.reshape(t, (1,) + t.shape) for t in tensors], axis=0)
    n, h, w, c = stacked.shape
    order = _canonical_frame_order(stacked.data)
    if order != list(range(n)):
        stacked = T.take(stacked, order, axis=0)
    return StackedFeatures(T.reshape(stacked, (n * h * w, c)), n, h, w)


def compute_scores(fa: StackedFeatures, bank: ScoringBank) -> Tensor:
    """Softmax over all positions of ``F^a · W_k``, one column per scoring group."""
    if fa.c != bank.c:
        raise ShapeMismatchError(
            f"features have {fa.c} channels but the scoring bank expects {bank.c}"
        )
    return T.softmax(T.matmul(fa.tensor, bank.weights), axis=0)


def aggregate_dfeatures(fa: StackedFeatures, scores: Tensor, atol: float = 1e-4) -> DFeatureSet:
    if scores.ndim != 2 or scores.shape[0] != fa.tensor.shape[0]:
        raise ShapeMismatchError(f"scores {scores.shape} do not match {fa.tensor.shape[0]} positions")
    col = scores.data.sum(axis=0)
    if not np.all(np.abs(col - 1.0) <= atol):
        raise NotNormalizedError(f"score columns must sum to 1 (max deviation {np.max(np.abs(col - 1.0)):.3g})")
    return DFeatureSet(T.matmul(T.transpose(scores), fa.tensor))


def update_scoring_bank(bank: ScoringBank, dfeat: DFeatureSet | np.ndarray) -> ScoringBank:
    """Moving average ``W_k <- λ W_k + (1 - λ) F^d_k`` applied to ``bank``."""
    if not bank.train_mode:
        raise EvalModeUpdateError("the scoring bank is frozen in eval mode")
    d = dfeat.features.data if isinstance(dfeat, DFeatureSet) else np.asarray(dfeat)
    if d.shape != (bank.K, bank.c):
        raise ShapeMismatchError(f"D-features {d.shape} do not match bank K×c = {bank.K}×{bank.c}")
    lam = bank.momentum
    w = bank.weights.data
    # replace rather than mutate: recorded graphs may still reference the old array
    bank.weights.data = (lam * w + (1.0 - lam) * d.T.astype(w.dtype)).astype(w.dtype)
    return bank


def _as_list(entry) -> list[DFeatureSet]:
    if isinstance(entry, DFeatureSet):
        return [entry]
    return list(entry)


def synchronized_update(banks: Sequence[ScoringBank], dfeats: Sequence) -> ScoringBank:
    """One moving-average step shared by all data-parallel replicas.

    ``dfeats[r]`` holds what worker ``r`` produced this step (a DFeatureSet or a
    list of them). Contributions are gathered in rank order and averaged with a
    fixed left-to-right summation, so the result only depends on the global
    sequence of D-features, not on how they were split across workers.
    """
    if not banks or len(banks) != len(dfeats):
        raise ValueError("need one D-feature contribution per replica")
    ref = banks[0].weights.data
    for b in banks[1:]:
        if b.weights.shape != ref.shape or b.momentum != banks[0].momentum:
            raise ReplicaDivergenceError("replicas disagree on bank shape or momentum")
        if not np.array_equal(b.weights.data, ref):
            raise ReplicaDivergenceError("scoring-bank replicas differ before synchronization")
    gathered = [d.features.data for entry in dfeats for d in _as_list(entry)]
    if not gathered:
        raise ValueError("no D-features to synchronize")
    total = np.zeros_like(gathered[0])
    for d in gathered:
        total = total + d
    mean_d = total / len(gathered)
    update_scoring_bank(banks[0], mean_d)
    for b in banks[1:]:
        b.weights.data = banks[0].weights.data.copy()
    return banks[0]


def dfm_forward(features, bank: ScoringBank, update: bool = True) -> DFeatureSet:
    """Stack, score and aggregate; in train mode optionally refresh the bank.

    Data-parallel training passes ``update=False`` and calls
    :func:`synchronized_update` after the optimizer step instead.
    """
    fa = stack_features(features)
    scores = compute_scores(fa, bank)
    dfeat = aggregate_dfeatures(fa, scores)
    if update and bank.train_mode:
        update_scoring_bank(bank, dfeat)
    return dfeat


class DFM(Module):
    """Holds the scoring bank inside a model (checkpoint key ``dfm.bank.weights``)."""

    def __init__(self, channels: int, K: int, momentum: float = 0.5, rng=None):
        super().__init__()
        self.bank = ScoringBank(channels, K, momentum, rng)

    def forward(self, features, update: bool = False) -> DFeatureSet:
        return dfm_forward(features, self.bank, update=update)
