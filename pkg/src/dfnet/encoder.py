"""Stride-8 convolutional feature encoder and DFT1 feature files."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Hashable, Sequence

import numpy as np

from dfnet import tensor as T
from dfnet.errors import ConfigError, InvalidInputSizeError, MalformedFileError, RankMismatchError
from dfnet.nn import BatchNorm2d, Conv2d, Module
from dfnet.tensor import Tensor


@dataclass
class EncoderConfig:
    in_channels: int = 3
    base_width: int = 8
    out_channels: int = 32
    downsample_factor: int = 8

    def __post_init__(self):
        if self.downsample_factor != 8:
            raise ConfigError(f"downsample_factor must be 8, got {self.downsample_factor}")
        if self.out_channels < 8:
            raise ConfigError(f"out_channels must be >= 8, got {self.out_channels}")
        if self.base_width < 1 or self.in_channels < 1:
            raise ConfigError("base_width and in_channels must be positive")


@dataclass
class FeatureMap:
    """One frame's h×w×c feature tensor."""

    tensor: Tensor
    source_frame: Hashable = None

    @property
    def h(self) -> int:
        return self.tensor.shape[0]

    @property
    def w(self) -> int:
        return self.tensor.shape[1]

    @property
    def c(self) -> int:
        return self.tensor.shape[2]


class ConvBlock(Module):
    def __init__(self, cin: int, cout: int, stride: int, rng: np.random.Generator):
        super().__init__()
        self.conv = Conv2d(cin, cout, 3, stride=stride, padding=1, rng=rng)
        self.bn = BatchNorm2d(cout)

    def forward(self, x: Tensor) -> Tensor:
        return T.relu(self.bn(self.conv(x)))


class Encoder(Module):
    """Four [3×3 conv, BN, ReLU] blocks (strides 2, 2, 2, 1) and a 1×1 projection."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        b, c = cfg.base_width, cfg.out_channels
        widths = [b, 2 * b, 4 * b, c]
        strides = [2, 2, 2, 1]
        cin = cfg.in_channels
        self.blocks = []
        for i, (width, stride) in enumerate(zip(widths, strides)):
            block = ConvBlock(cin, width, stride, rng)
            setattr(self, f"block{i}", block)
            self.blocks.append(block)
            cin = width
        self.reduce = Conv2d(c, c, 1, rng=rng)

    def forward(self, images: Tensor) -> Tensor:
        """Map N×H×W×3 (or H×W×3) images to N×(H/8)×(W/8)×c features."""
        h, w = images.shape[-3], images.shape[-2]
        check_input_size(h, w)
        if images.shape[-1] != self.cfg.in_channels:
            raise InvalidInputSizeError(
                f"expected {self.cfg.in_channels} input channels, got {images.shape[-1]}"
            )
        x = images
        for block in self.blocks:
            x = block(x)
        return self.reduce(x)


def check_input_size(h: int, w: int) -> None:
    if h % 8 or w % 8 or h < 16 or w < 16:
        raise InvalidInputSizeError(
            f"input size {h}×{w} must be a multiple of 8 and at least 16×16"
        )


def encode(image, cfg: EncoderConfig, weights: Encoder, source_frame=None) -> FeatureMap:
    """Encode a single H×W×3 image into its (H/8)×(W/8)×c feature map."""
    if weights.cfg != cfg:
        raise ConfigError("encoder weights were built for a different EncoderConfig")
    x = T.as_tensor(image)
    if x.ndim != 3:
        raise InvalidInputSizeError(f"encode expects an H×W×3 image, got shape {x.shape}")
    return FeatureMap(weights(x), source_frame)


def save_features(path, maps: Sequence[FeatureMap] | np.ndarray) -> None:
    """Write feature maps as one rank-4 N×h×w×c DFT1 tensor."""
    if isinstance(maps, np.ndarray):
        arr = maps
    else:
        arr = np.stack([m.tensor.data for m in maps])
    T.save_tensor(path, arr)


def load_features(path) -> list[FeatureMap]:
    blob = Path(path).read_bytes()
    if not blob:
        raise MalformedFileError("empty feature file", 0)
    arr = T.parse_dft(blob)
    if arr.ndim != 4:
        raise RankMismatchError(f"feature file must hold a rank-4 N×h×w×c tensor, found rank {arr.ndim}")
    return [FeatureMap(Tensor(arr[i], dtype=np.float32), i) for i in range(arr.shape[0])]
