"""Two-stage training: static pretraining, then whole-model video/co-segmentation training.

Data parallelism is simulated in-process. Each worker owns a full model replica
and a slice of the global batch; every example (one frame group) is a separate
forward/backward pass. After each iteration the per-example gradients, batchnorm
statistics and D-features are gathered in global example order and reduced with
a fixed summation order, and the same update is applied to every replica. The
result therefore depends only on the global batch, not on the worker count.
"""

from __future__ import annotations

import copy
import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from dfnet import tensor as T
from dfnet.data import Dataset, Group, to_float
from dfnet.dfm import DFeatureSet, synchronized_update
from dfnet.errors import (
    ConfigError,
    DatasetKindError,
    NotNormalizedError,
    OutOfRangeError,
    ReplicaDivergenceError,
    ShapeMismatchError,
    TooFewFramesError,
    TrainingDivergedError,
)
from dfnet.model import DFNet, save_checkpoint, upsample_logits
from dfnet.nn import BatchNorm2d
from dfnet.tensor import Tensor

log = logging.getLogger(__name__)

STAGES = ("static_pretrain", "video", "coseg")
LOSSES = ("bce", "bce_logits")
_STAGE_KIND = {"static_pretrain": "static_blobs", "video": "moving_blobs", "coseg": "coseg_groups"}


@dataclass
class TrainConfig:
    stage: str = "video"
    base_lr: float = 0.05
    batch_size: int = 8
    max_iter: int = 2000
    power: float = 0.9
    weight_decay: float = 1e-4
    momentum: float = 0.5
    n_workers: int = 1
    seed: int = 0
    crf_in_training: bool = True
    grad_clip: float | None = None
    coseg_group_size: int = 3
    # None: batch statistics in static pretraining, frozen running statistics afterwards
    freeze_bn: bool | None = None
    augment: bool = True
    # "bce": clamped BCE on sigmoid outputs; "bce_logits": the same loss from logits, no clamp
    loss: str = "bce"

    @property
    def bn_frozen(self) -> bool:
        return self.stage != "static_pretrain" if self.freeze_bn is None else self.freeze_bn

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be positive")
        if self.power <= 0:
            raise ConfigError("power must be positive")
        if self.max_iter < 0:
            raise ConfigError("max_iter must be >= 0")
        if self.n_workers < 1 or self.batch_size < 1:
            raise ConfigError("n_workers and batch_size must be >= 1")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}, got {self.loss!r}")


@dataclass
class SampleBatch:
    frames: np.ndarray  # N×H×W×3 float32 in [0, 1]
    masks: np.ndarray  # N×H×W in {0, 1}
    group_id: str = ""

    def __post_init__(self):
        if len(self.frames) != len(self.masks):
            raise ShapeMismatchError("frames and masks differ in count")
        if not np.all((self.masks == 0) | (self.masks == 1)):
            raise ValueError("masks must be binary")


# ---------------------------------------------------------------------------
# loss and optimizer


def bce_loss(pred: Tensor, gt, eps: float = 1e-7) -> Tensor:
    """Mean binary cross-entropy; predictions are clamped to [eps, 1 - eps]."""
    pred = T.as_tensor(pred)
    gt = np.asarray(gt.data if isinstance(gt, Tensor) else gt, dtype=pred.dtype)
    if pred.shape != gt.shape:
        raise ShapeMismatchError(f"bce_loss: prediction {pred.shape} vs target {gt.shape}")
    p = T.clip(pred, eps, 1.0 - eps)
    one = Tensor(np.ones_like(gt))
    g = Tensor(gt)
    ll = g * T.log(p) + (one - g) * T.log(one - p)
    return -T.mean(ll)


def bce_with_logits(logits: Tensor, gt) -> Tensor:
    """Mean BCE of ``sigmoid(logits)`` computed as ``softplus(z) - gt * z``.

    Same value as :func:`bce_loss` inside its clamp range, but saturated wrong
    predictions keep a gradient instead of being cut off by the clamp.
    """
    z = T.as_tensor(logits)
    gt = np.asarray(gt.data if isinstance(gt, Tensor) else gt, dtype=z.dtype)
    if z.shape != gt.shape:
        raise ShapeMismatchError(f"bce_with_logits: logits {z.shape} vs target {gt.shape}")
    return T.mean(T.softplus(z) - z * Tensor(gt))


def poly_lr(base_lr: float, it: int, max_iter: int, power: float) -> float:
    if not 0 <= it <= max_iter:
        raise OutOfRangeError(f"iteration {it} outside [0, {max_iter}]")
    return base_lr * (1.0 - it / max_iter) ** power


def sgd_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    lr: float,
    weight_decay: float,
) -> dict[str, np.ndarray]:
    """``p - lr * (g + weight_decay * p)`` for every entry; returns new arrays."""
    if set(params) != set(grads):
        raise ShapeMismatchError("parameter and gradient sets differ")
    out = {}
    for name, p in params.items():
        g = grads[name]
        if np.shape(g) != np.shape(p):
            raise ShapeMismatchError(f"{name}: gradient {np.shape(g)} vs parameter {np.shape(p)}")
        out[name] = (p - lr * (g + weight_decay * p)).astype(p.dtype)
    return out


# ---------------------------------------------------------------------------
# sampling


def sample_video_batch(dataset: Dataset, video_id: str, rng: np.random.Generator) -> SampleBatch:
    """Anchor (first) frame plus one uniformly drawn later frame of the video."""
    group = dataset.group(video_id)
    if len(group) < 2:
        raise TooFewFramesError(f"video {video_id} has {len(group)} frame(s); need at least 2")
    j = int(rng.integers(1, len(group)))
    idx = [0, j]
    return SampleBatch(to_float(group.frames[idx]), group.masks[idx].astype(np.float32), video_id)


def sample_coseg_group(dataset: Dataset, class_id: str, rng: np.random.Generator, size: int = 3) -> SampleBatch:
    group = dataset.group(class_id)
    if len(group) < size:
        raise TooFewFramesError(f"class {class_id} has {len(group)} image(s); need at least {size}")
    idx = np.sort(rng.choice(len(group), size=size, replace=False))
    return SampleBatch(to_float(group.frames[idx]), group.masks[idx].astype(np.float32), class_id)


def sample_static(dataset: Dataset, image_id: str, rng: np.random.Generator) -> SampleBatch:
    group = dataset.group(image_id)
    j = int(rng.integers(0, len(group)))
    return SampleBatch(to_float(group.frames[j : j + 1]), group.masks[j : j + 1].astype(np.float32), image_id)


def augment_sample(sample: SampleBatch, rng: np.random.Generator) -> SampleBatch:
    """Random horizontal/vertical flips and colour-channel permutation, shared by all frames."""
    frames, masks = sample.frames, sample.masks
    if rng.random() < 0.5:
        frames, masks = frames[:, :, ::-1], masks[:, :, ::-1]
    if rng.random() < 0.5:
        frames, masks = frames[:, ::-1], masks[:, ::-1]
    frames = frames[..., rng.permutation(3)]
    return SampleBatch(np.ascontiguousarray(frames), np.ascontiguousarray(masks), sample.group_id)


def _draw_batch(cfg: TrainConfig, dataset: Dataset, rng: np.random.Generator) -> list[SampleBatch]:
    names = dataset.names
    picks = rng.integers(0, len(names), size=cfg.batch_size)
    batch = []
    for k in picks:
        name = names[int(k)]
        if cfg.stage == "static_pretrain":
            batch.append(sample_static(dataset, name, rng))
        elif cfg.stage == "video":
            batch.append(sample_video_batch(dataset, name, rng))
        else:
            batch.append(sample_coseg_group(dataset, name, rng, cfg.coseg_group_size))
    if cfg.augment:
        batch = [augment_sample(b, rng) for b in batch]
    return batch


# ---------------------------------------------------------------------------
# one data-parallel iteration


@dataclass
class _ExampleResult:
    weight: int
    loss: float
    grads: dict[str, np.ndarray]
    bn_stats: list[tuple[np.ndarray, np.ndarray]]
    dfeat: DFeatureSet | None


def _bn_modules(model: DFNet) -> list[BatchNorm2d]:
    return [m for m in model.modules() if isinstance(m, BatchNorm2d)]


def _example_step(model: DFNet, sample: SampleBatch, cfg: TrainConfig, names: list[str]) -> _ExampleResult:
    model.zero_grad()
    for m in _bn_modules(model):
        object.__setattr__(m, "last_stats", None)
    images = Tensor(sample.frames)
    if cfg.stage == "static_pretrain":
        out = model.forward_static(images)
    else:
        out = model.forward_group(images, use_crf=cfg.crf_in_training and model.cfg.use_crf)
    H, W = sample.frames.shape[1:3]
    logits = upsample_logits(out.logits, H, W)
    if cfg.loss == "bce":
        loss = bce_loss(T.sigmoid(logits), sample.masks)
    else:
        loss = bce_with_logits(logits, sample.masks)
    loss.backward()
    params = dict(model.named_parameters())
    grads = {n: (params[n].grad if params[n].grad is not None else np.zeros_like(params[n].data)) for n in names}
    stats = [m.last_stats for m in _bn_modules(model) if m.last_stats is not None]
    dfeat = None
    if out.dfeat is not None:
        dfeat = DFeatureSet(Tensor(out.dfeat.features.data, dtype=out.dfeat.features.dtype))
    return _ExampleResult(1, loss.item(), grads, stats, dfeat)


def _worker(model: DFNet, samples: list[SampleBatch], cfg: TrainConfig, names: list[str]) -> list[_ExampleResult]:
    if cfg.stage == "static_pretrain":
        # independent images share one forward so batchnorm sees the whole shard
        merged = SampleBatch(
            np.concatenate([s.frames for s in samples]), np.concatenate([s.masks for s in samples])
        )
        res = _example_step(model, merged, cfg, names)
        res.weight = len(samples)
        return [res]
    return [_example_step(model, s, cfg, names) for s in samples]


def _split(items: list, n: int) -> list[list]:
    bounds = np.linspace(0, len(items), n + 1).round().astype(int)
    return [items[bounds[i] : bounds[i + 1]] for i in range(n)]


@dataclass
class TrainResult:
    model: DFNet
    trace: list[tuple[int, float, float]] = field(default_factory=list)
    replicas: list[DFNet] = field(default_factory=list)


def train_stage(
    cfg: TrainConfig,
    model: DFNet,
    dataset: Dataset,
    checkpoint_path=None,
    trace_path=None,
    progress: bool = False,
) -> TrainResult:
    """Run ``cfg.max_iter`` iterations of the configured stage and return the trained model."""
    expected = _STAGE_KIND[cfg.stage]
    if dataset.kind != expected:
        raise DatasetKindError(f"stage {cfg.stage!r} needs a {expected} dataset, got {dataset.kind!r}")
    if cfg.stage == "coseg" and cfg.crf_in_training is None:
        raise ConfigError("crf_in_training must be set")
    if model.dfm.bank.momentum != cfg.momentum:
        model.dfm.bank.momentum = cfg.momentum

    rng = np.random.default_rng(cfg.seed)
    model.train()
    if cfg.bn_frozen:
        for m in _bn_modules(model):
            object.__setattr__(m, "training", False)
    replicas = [model] + [copy.deepcopy(model) for _ in range(cfg.n_workers - 1)]
    for r in replicas:
        for m in _bn_modules(r):
            object.__setattr__(m, "defer_stats", True)
    static = cfg.stage == "static_pretrain"
    names = [
        n for n, p in model.named_parameters()
        if p.optimize and (not static or n.startswith(("encoder.", "adapter.")))
    ]
    trace: list[tuple[int, float, float]] = []
    pool = ThreadPoolExecutor(max_workers=cfg.n_workers) if cfg.n_workers > 1 else None
    try:
        for it in range(cfg.max_iter):
            lr = poly_lr(cfg.base_lr, it, cfg.max_iter, cfg.power)
            batch = _draw_batch(cfg, dataset, rng)
            shards = _split(batch, cfg.n_workers)
            try:
                if pool is None:
                    per_worker = [_worker(replicas[0], shards[0], cfg, names)]
                else:
                    futures = [pool.submit(_worker, r, s, cfg, names) for r, s in zip(replicas, shards)]
                    per_worker = [f.result() for f in futures]
            except NotNormalizedError as exc:
                # overflowing activations surface first as NaN score columns
                raise TrainingDivergedError(it, float("nan"), "activations") from exc
            results = [res for worker in per_worker for res in worker]

            n_total = sum(r.weight for r in results)
            loss = sum(r.weight * r.loss for r in results) / n_total
            if not np.isfinite(loss):
                raise TrainingDivergedError(it, loss)

            grads = {}
            for n in names:
                total = np.zeros_like(results[0].grads[n])
                for r in results:
                    total = total + r.weight * r.grads[n]
                grads[n] = total / n_total
            if cfg.grad_clip is not None:
                norm = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values())))
                if norm > cfg.grad_clip:
                    grads = {n: (g * (cfg.grad_clip / norm)).astype(g.dtype) for n, g in grads.items()}

            current = {n: p.data for n, p in model.named_parameters() if n in grads}
            updated = sgd_step(current, grads, lr, cfg.weight_decay)
            bad = next((n for n, v in updated.items() if not np.all(np.isfinite(v))), None)
            if bad is not None:
                raise TrainingDivergedError(it, loss, f"parameter {bad}")
            for r in replicas:
                params = dict(r.named_parameters())
                for n, v in updated.items():
                    params[n].data = v.copy()
                    params[n].grad = None

            # synchronized batchnorm running statistics
            n_bn = len(results[0].bn_stats)
            if any(len(r.bn_stats) != n_bn for r in results):
                raise ReplicaDivergenceError("examples disagree on the number of batchnorm layers")
            for i in range(n_bn):
                mean = np.zeros_like(results[0].bn_stats[i][0])
                var = np.zeros_like(results[0].bn_stats[i][1])
                for r in results:
                    mean = mean + r.bn_stats[i][0]
                    var = var + r.bn_stats[i][1]
                mean, var = mean / len(results), var / len(results)
                for rep in replicas:
                    _bn_modules(rep)[i].apply_stats(mean, var)

            if not static:
                contributions = [[r.dfeat for r in worker] for worker in per_worker]
                synchronized_update([r.dfm.bank for r in replicas], contributions)

            if len(replicas) > 1:
                _check_replicas(replicas)
            trace.append((it, lr, loss))
            if progress and (it % 100 == 0 or it == cfg.max_iter - 1):
                log.info("%s iter %d lr %.5f loss %.5f", cfg.stage, it, lr, loss)
    finally:
        if pool is not None:
            pool.shutdown()
        for r in replicas:
            for m in _bn_modules(r):
                object.__setattr__(m, "defer_stats", False)
                object.__setattr__(m, "last_stats", None)
        model.train()

    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model, {"stage": cfg.stage, "iterations": str(cfg.max_iter)})
    if trace_path is not None:
        write_trace(trace_path, trace)
    return TrainResult(model, trace, replicas)


def _check_replicas(replicas: list[DFNet]) -> None:
    ref = replicas[0].state_dict()
    for r in replicas[1:]:
        other = r.state_dict()
        for k, v in ref.items():
            if not np.array_equal(v, other[k]):
                raise ReplicaDivergenceError(f"replica state {k!r} diverged")


def write_trace(path, trace) -> None:
    with open(Path(path), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iter", "lr", "loss"])
        for it, lr, loss in trace:
            w.writerow([it, repr(float(lr)), repr(float(loss))])
