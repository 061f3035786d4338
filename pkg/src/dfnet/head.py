"""Self-weighted fusion and the mask decoder."""

from __future__ import annotations

import numpy as np

from dfnet import tensor as T
from dfnet.encoder import FeatureMap
from dfnet.errors import ShapeMismatchError
from dfnet.nn import BatchNorm2d, Conv2d, Module
from dfnet.tensor import Tensor

RELU_THEN_BN = "relu_bn"
BN_THEN_RELU = "bn_relu"


class HeadParams(Module):
    """Gate convs (c→1), 3×3 conv (2c→c) with batchnorm, and the 1×1 output conv."""

    def __init__(self, channels: int, rng: np.random.Generator | None = None, order: str = RELU_THEN_BN):
        super().__init__()
        if order not in (RELU_THEN_BN, BN_THEN_RELU):
            raise ValueError(f"unknown head order {order!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.channels = channels
        self.order = order
        self.gate_new = Conv2d(channels, 1, 1, rng=rng)
        self.gate_orig = Conv2d(channels, 1, 1, rng=rng)
        self.conv3x3 = Conv2d(2 * channels, channels, 3, padding=1, rng=rng)
        self.bn = BatchNorm2d(channels)
        self.conv1x1 = Conv2d(channels, 1, 1, rng=rng)


def _tensor(x) -> Tensor:
    return x.tensor if isinstance(x, FeatureMap) else T.as_tensor(x)


def self_weight_fuse(f_new, f_orig, params: HeadParams) -> Tensor:
    """Scale each map by a sigmoid 1×1-conv gate of itself, then concatenate channels."""
    a, b = _tensor(f_new), _tensor(f_orig)
    if a.shape != b.shape or a.shape[-1] != params.channels:
        raise ShapeMismatchError(f"cannot fuse {a.shape} with {b.shape} (c={params.channels})")
    a = a * T.sigmoid(params.gate_new(a))
    b = b * T.sigmoid(params.gate_orig(b))
    return T.concat([a, b], axis=-1)


def predict_logits(fused: Tensor, params: HeadParams) -> Tensor:
    """Pre-sigmoid mask logits at feature resolution (trailing channel dropped)."""
    fused = T.as_tensor(fused)
    if fused.shape[-1] != 2 * params.channels:
        raise ShapeMismatchError(f"head expects {2 * params.channels} channels, got {fused.shape[-1]}")
    x = params.conv3x3(fused)
    if params.order == RELU_THEN_BN:
        x = params.bn(T.relu(x))
    else:
        x = T.relu(params.bn(x))
    x = params.conv1x1(x)
    return T.reshape(x, x.shape[:-1])


def predict_mask(fused: Tensor, params: HeadParams) -> Tensor:
    """Foreground probability per feature cell, strictly inside (0, 1) for finite logits."""
    return T.sigmoid(predict_logits(fused, params))
