"""Attention between frame features and the D-features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dfnet import tensor as T
from dfnet.dfm import DFeatureSet
from dfnet.encoder import FeatureMap
from dfnet.errors import NotNormalizedError, ShapeMismatchError
from dfnet.nn import Module, Parameter, kaiming_normal
from dfnet.tensor import Tensor


class AttentionParams(Module):
    """Learnable c×c bilinear form, initialized near the identity."""

    def __init__(self, channels: int, rng: np.random.Generator | None = None, noise: float = 0.01):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        init = np.eye(channels) + noise * kaiming_normal(rng, (channels, channels), channels)
        self.w_att = Parameter(init)


@dataclass
class AttentionMap:
    """Logits ``P`` of shape M×K (or N×M×K for a batch of frames), M = h·w."""

    logits: Tensor
    h: int
    w: int

    def __post_init__(self):
        if self.logits.shape[-2] != self.h * self.w:
            raise ShapeMismatchError(f"attention map has {self.logits.shape[-2]} rows, expected {self.h}·{self.w}")

    @property
    def M(self) -> int:
        return self.h * self.w

    @property
    def K(self) -> int:
        return self.logits.shape[-1]


def attention_logits(f, dfeat: DFeatureSet, params: AttentionParams) -> AttentionMap:
    """``P = reshape(F) · W_att · transpose(F^d)``.

    ``f`` is a FeatureMap / h×w×c tensor, or an N×h×w×c tensor for a batch.
    """
    x = f.tensor if isinstance(f, FeatureMap) else T.as_tensor(f)
    c = x.shape[-1]
    if dfeat.c != c or params.w_att.shape != (c, c):
        raise ShapeMismatchError(
            f"channel mismatch: features {c}, D-features {dfeat.c}, W_att {params.w_att.shape}"
        )
    h, w = x.shape[-3], x.shape[-2]
    flat = T.reshape(x, x.shape[:-3] + (h * w, c))
    projected = T.matmul(T.matmul(flat, params.w_att), T.transpose(dfeat.features))
    return AttentionMap(projected, h, w)


def reconstruct_features(q: Tensor, dfeat: DFeatureSet, h: int, w: int, atol: float = 1e-4) -> FeatureMap:
    """Assign D-features to positions: ``F^new[i] = Σ_k q[i, k] d_k``."""
    q = T.as_tensor(q)
    if q.shape[-1] != dfeat.K or q.shape[-2] != h * w:
        raise ShapeMismatchError(f"q {q.shape} incompatible with {h}×{w} positions and K={dfeat.K}")
    rows = q.data.sum(axis=-1)
    if not np.all(np.abs(rows - 1.0) <= atol):
        raise NotNormalizedError("attention rows must be probability distributions")
    out = T.matmul(q, dfeat.features)
    return FeatureMap(T.reshape(out, q.shape[:-2] + (h, w, dfeat.c)))
