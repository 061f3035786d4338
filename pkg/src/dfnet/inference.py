"""Group inference with multi-scale and mirrored test-time averaging."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from dfnet import tensor as T
from dfnet.errors import ConfigError, EmptyGroupError, ShapeMismatchError
from dfnet.model import DFNet, heatmap, upsample_logits
from dfnet.tensor import Tensor


@dataclass
class InferConfig:
    scales: list[float] = field(default_factory=lambda: [0.75, 1.0, 1.25])
    mirror: bool = True
    threshold: float = 0.5
    n_in: int = 4
    use_crf: bool = True
    resize_before_average: bool = True

    def __post_init__(self):
        if not self.scales or any(s <= 0 for s in self.scales):
            raise ConfigError("scales must be a non-empty list of positive numbers")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError("threshold must lie in (0, 1)")
        if self.n_in < 1:
            raise ConfigError("n_in must be >= 1")


def scaled_size(n: int, scale: float) -> int:
    """``n * scale`` rounded to the nearest multiple of 8 (at least 16)."""
    return max(16, 8 * int(np.floor(n * scale / 8.0 + 0.5)))


def select_group(n_frames: int, ref: int, n_in: int) -> list[int]:
    """The reference frame followed by ``n_in - 1`` evenly spaced other frames."""
    others = [i for i in range(n_frames) if i != ref]
    k = min(n_in - 1, len(others))
    if k <= 0:
        return [ref]
    if k == len(others):
        return [ref] + others
    picks = np.linspace(0, len(others) - 1, k).round().astype(int)
    return [ref] + [others[i] for i in picks]


def _as_frames(frames) -> np.ndarray:
    if isinstance(frames, Tensor):
        frames = frames.data
    if isinstance(frames, np.ndarray):
        arr = frames
    else:
        frames = list(frames)
        if not frames:
            raise EmptyGroupError("cannot run inference on an empty frame group")
        arr = np.stack([f.data if isinstance(f, Tensor) else np.asarray(f) for f in frames])
    if arr.ndim == 3:
        arr = arr[None]
    if arr.shape[0] == 0:
        raise EmptyGroupError("cannot run inference on an empty frame group")
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ShapeMismatchError(f"expected N×H×W×3 frames, got {arr.shape}")
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    return arr.astype(T.get_default_dtype())


def _variant_logits(model: DFNet, images: np.ndarray, cfg: InferConfig) -> list[Tensor]:
    """Per-frame h×w logits for one scaled/mirrored copy of the group."""
    # frames are encoded one at a time so each feature map is independent of its neighbours
    feats = [model.encoder(Tensor(img[None])) for img in images]
    out = []
    for ref in range(len(images)):
        idx = select_group(len(images), ref, cfg.n_in)
        dfeat = model.dfm(T.concat([feats[i] for i in idx], axis=0))
        logits = model.decode(feats[ref], images[ref : ref + 1], dfeat, cfg.use_crf)
        out.append(T.reshape(logits, logits.shape[1:]))
    return out


def _static_logits(model: DFNet, images: np.ndarray, cfg: InferConfig) -> list[Tensor]:
    out = []
    for img in images:
        logits = model.forward_static(Tensor(img[None])).logits
        out.append(T.reshape(logits, logits.shape[1:]))
    return out


def _averaged(frames, model: DFNet, cfg: InferConfig, variant) -> list[np.ndarray]:
    images = _as_frames(frames)
    n, H, W, _ = images.shape
    was_training = model.training
    model.eval()
    try:
        with T.no_grad():
            acc = None
            n_variants = 0
            for scale in cfg.scales:
                h, w = scaled_size(H, scale), scaled_size(W, scale)
                scaled = images if (h, w) == (H, W) else T.bilinear_resize(Tensor(images), h, w).data
                for flip in ([False, True] if cfg.mirror else [False]):
                    x = scaled[:, :, ::-1] if flip else scaled
                    logits = variant(model, np.ascontiguousarray(x), cfg)
                    stack = T.concat([T.reshape(l, (1,) + l.shape) for l in logits], axis=0)
                    if cfg.resize_before_average:
                        maps = heatmap(stack, H, W).data
                    else:
                        maps = upsample_logits(stack, H // 8, W // 8).data
                    if flip:
                        maps = maps[:, :, ::-1]
                    acc = maps.copy() if acc is None else acc + maps
                    n_variants += 1
            avg = acc / n_variants
            if not cfg.resize_before_average:
                avg = heatmap(Tensor(avg), H, W).data
    finally:
        model.train(was_training)
    return [np.ascontiguousarray(m) for m in avg]


def infer_group(frames, model: DFNet, cfg: InferConfig | None = None) -> list[np.ndarray]:
    """One H×W foreground heatmap per input frame, averaged over scales and mirroring."""
    return _averaged(frames, model, cfg or InferConfig(), _variant_logits)


def infer_static(frames, model: DFNet, cfg: InferConfig | None = None) -> list[np.ndarray]:
    """Stage-1 baseline heatmaps: encoder and adapter only, same test-time averaging."""
    return _averaged(frames, model, cfg or InferConfig(), _static_logits)


def binarize(heat, threshold: float = 0.5) -> np.ndarray:
    h = heat.data if isinstance(heat, Tensor) else np.asarray(heat)
    return (h >= threshold).astype(np.uint8)
