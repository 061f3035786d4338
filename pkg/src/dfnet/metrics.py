"""Segmentation and saliency metrics: IoU, boundary F, MAE and max F-measure."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from dfnet.errors import ShapeMismatchError
from dfnet.tensor import Tensor

BETA2 = 0.3
N_THRESHOLDS = 255


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _pair(a, b, what: str) -> tuple[np.ndarray, np.ndarray]:
    a, b = _arr(a), _arr(b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{what}: shapes {a.shape} and {b.shape} differ")
    return a, b


def iou_j(pred, gt) -> float:
    p, g = _pair(pred, gt, "iou_j")
    p, g = p.astype(bool), g.astype(bool)
    union = int(np.count_nonzero(p | g))
    if union == 0:
        return 1.0
    return int(np.count_nonzero(p & g)) / union


def boundary_pixels(mask) -> np.ndarray:
    """Foreground pixels with a background 4-neighbour or lying on the image edge."""
    m = _arr(mask).astype(bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    return m & ~interior


def default_tolerance(shape) -> float:
    return float(math.ceil(0.008 * math.hypot(shape[0], shape[1])))


def _disk(tol: float) -> np.ndarray:
    r = int(math.floor(tol))
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    return yy * yy + xx * xx <= tol * tol


def boundary_f(pred, gt, tol: float | None = None) -> float:
    """Contour F-measure (β = 1) with Euclidean matching radius ``tol`` pixels."""
    p, g = _pair(pred, gt, "boundary_f")
    if tol is None:
        tol = default_tolerance(p.shape)
    if tol < 0:
        raise ValueError("tol must be non-negative")
    bp, bg = boundary_pixels(p), boundary_pixels(g)
    n_p, n_g = int(bp.sum()), int(bg.sum())
    if n_p == 0 and n_g == 0:
        return 1.0
    if n_p == 0 or n_g == 0:
        return 0.0
    disk = _disk(tol)
    near_g = ndimage.binary_dilation(bg, structure=disk)
    near_p = ndimage.binary_dilation(bp, structure=disk)
    precision = int((bp & near_g).sum()) / n_p
    recall = int((bg & near_p).sum()) / n_g
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def mae(heat, gt) -> float:
    h, g = _pair(heat, gt, "mae")
    # correctly rounded sum, so the value does not depend on summation order
    return math.fsum(np.abs(h.astype(np.float64) - g.astype(np.float64)).ravel().tolist()) / h.size


def thresholds() -> np.ndarray:
    return np.arange(1, N_THRESHOLDS + 1, dtype=np.float64) / (N_THRESHOLDS + 1)


def pr_counts(heat, gt) -> list[tuple[float, float]]:
    """(precision, recall) at each threshold; an empty prediction counts as P = 1, R = 0."""
    h, g = _pair(heat, gt, "pr_curve")
    h = h.astype(np.float64)
    g = g.astype(bool)
    n_gt = int(g.sum())
    curve = []
    for t in thresholds():
        b = h >= t
        n_pred = int(b.sum())
        tp = int((b & g).sum())
        if n_pred == 0:
            curve.append((1.0, 0.0))
            continue
        precision = tp / n_pred
        recall = tp / n_gt if n_gt else 1.0
        curve.append((precision, recall))
    return curve


def f_beta(precision: float, recall: float, beta2: float = BETA2) -> float:
    denom = beta2 * precision + recall
    if denom == 0:
        return 0.0
    return (1 + beta2) * precision * recall / denom


def max_fmeasure(heat, gt, beta2: float = BETA2) -> tuple[float, list[tuple[float, float]]]:
    curve = pr_counts(heat, gt)
    return max(f_beta(p, r, beta2) for p, r in curve), curve


@dataclass
class MetricsReport:
    j_mean: float
    boundary_f: float
    mae: float
    max_f: float
    pr_curve: list[tuple[float, float]] = field(default_factory=list)
    n_frames: int = 0

    def to_dict(self) -> dict:
        return {
            "j_mean": self.j_mean,
            "boundary_f": self.boundary_f,
            "mae": self.mae,
            "max_f": self.max_f,
            "n_frames": self.n_frames,
            "pr_curve": [list(pr) for pr in self.pr_curve],
        }


def evaluate(heatmaps, gts, threshold: float = 0.5, tol: float | None = None) -> MetricsReport:
    """Frame-averaged metrics; the PR curve averages precision and recall over frames."""
    heatmaps, gts = list(heatmaps), list(gts)
    if len(heatmaps) != len(gts):
        raise ShapeMismatchError(f"{len(heatmaps)} heatmaps for {len(gts)} masks")
    if not heatmaps:
        raise ValueError("nothing to evaluate")
    js, fs, maes = [], [], []
    p_sum = np.zeros(N_THRESHOLDS)
    r_sum = np.zeros(N_THRESHOLDS)
    for h, g in zip(heatmaps, gts):
        mask = (_arr(h) >= threshold).astype(np.uint8)
        js.append(iou_j(mask, g))
        fs.append(boundary_f(mask, g, tol))
        maes.append(mae(h, g))
        curve = np.array(pr_counts(h, g))
        p_sum += curve[:, 0]
        r_sum += curve[:, 1]
    n = len(heatmaps)
    curve = [(float(p), float(r)) for p, r in zip(p_sum / n, r_sum / n)]
    return MetricsReport(
        j_mean=float(np.mean(js)),
        boundary_f=float(np.mean(fs)),
        mae=float(np.mean(maes)),
        max_f=max(f_beta(p, r) for p, r in curve),
        pr_curve=curve,
        n_frames=n,
    )
