"""Fully connected CRF over attention labels with unrolled mean-field inference.

Each feature-grid position picks one of K labels (D-features). The Gibbs energy
is a sum of unary terms ``-P[i, k]`` and Gaussian pairwise terms

    k(i, j) = w_a exp(-|p_i - p_j|^2 / 2θα^2 - |I_i - I_j|^2 / 2θβ^2)
            + w_s exp(-|p_i - p_j|^2 / 2θγ^2)

weighted by a label compatibility matrix. Mean-field iterations are plain
tensor ops, so gradients flow through them into the logits and compatibility.
The kernel itself is a constant of each forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from dfnet import tensor as T
from dfnet.atm import AttentionMap
from dfnet.errors import (
    NotNormalizedError,
    ShapeMismatchError,
    SizeCapExceededError,
    UpsamplingRequestedError,
)
from dfnet.nn import Module, Parameter
from dfnet.tensor import Tensor


def potts(K: int) -> np.ndarray:
    return 1.0 - np.eye(K)


@dataclass
class CrfParams:
    n_iters: int = 5
    w_appearance: float = 1.0
    w_smoothness: float = 0.5
    theta_alpha: float = 8.0
    theta_beta: float = 0.1
    theta_gamma: float = 3.0
    compatibility: Tensor | None = field(default=None, metadata={"kv": False})
    max_positions: int = 4096

    def __post_init__(self):
        if self.n_iters < 0:
            raise ValueError("n_iters must be non-negative")
        if self.w_appearance < 0 or self.w_smoothness < 0:
            raise ValueError("kernel weights must be non-negative")
        if min(self.theta_alpha, self.theta_beta, self.theta_gamma) <= 0:
            raise ValueError("bandwidths must be strictly positive")

    def compat_for(self, K: int) -> Tensor:
        if self.compatibility is None:
            return Tensor(potts(K))
        if self.compatibility.shape != (K, K):
            raise ShapeMismatchError(f"compatibility {self.compatibility.shape} does not match K={K}")
        return self.compatibility


@dataclass
class Guidance:
    """Guidance image sampled on the feature grid (h×w×3, values in [0, 1])."""

    image: np.ndarray
    positions: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.image = np.asarray(self.image)
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ShapeMismatchError(f"guidance must be h×w×3, got {self.image.shape}")
        h, w = self.image.shape[:2]
        yy, xx = np.mgrid[0:h, 0:w]
        self.positions = np.stack([yy.ravel(), xx.ravel()], axis=1).astype(np.float64)

    @property
    def h(self) -> int:
        return self.image.shape[0]

    @property
    def w(self) -> int:
        return self.image.shape[1]


def build_guidance(image, h: int, w: int) -> Guidance:
    img = image.data if isinstance(image, Tensor) else np.asarray(image)
    H, W = img.shape[:2]
    if h > H or w > W:
        raise UpsamplingRequestedError(f"guidance {h}×{w} would upsample a {H}×{W} image")
    with T.no_grad():
        small = T.bilinear_resize(Tensor(img, dtype=img.dtype if img.dtype.kind == "f" else None), h, w)
    return Guidance(small.data)


def pairwise_kernel(g: Guidance, params: CrfParams) -> np.ndarray:
    """Dense M×M pairwise affinities with a zero diagonal."""
    M = g.h * g.w
    if M > params.max_positions:
        raise SizeCapExceededError(f"{M} positions exceed the brute-force cap of {params.max_positions}")
    pos = g.positions
    col = g.image.reshape(M, 3).astype(np.float64)
    d_pos = ((pos[:, None, :] - pos[None, :, :]) ** 2).sum(-1)
    d_col = ((col[:, None, :] - col[None, :, :]) ** 2).sum(-1)
    k = np.zeros((M, M))
    if params.w_appearance:
        k += params.w_appearance * np.exp(
            -d_pos / (2 * params.theta_alpha**2) - d_col / (2 * params.theta_beta**2)
        )
    if params.w_smoothness:
        k += params.w_smoothness * np.exp(-d_pos / (2 * params.theta_gamma**2))
    np.fill_diagonal(k, 0.0)
    return k


def mean_field_step(q: Tensor, unary: Tensor, kernel, compat: Tensor, atol: float = 1e-4) -> Tensor:
    """One update ``q' = softmax(unary - (kernel · q) · compat)`` over labels.

    ``unary`` holds label scores (the negated unary energy). Works on M×K
    inputs or batches N×M×K with an N×M×M kernel.
    """
    q = T.as_tensor(q)
    rows = q.data.sum(axis=-1)
    if not np.all(np.abs(rows - 1.0) <= atol):
        raise NotNormalizedError("mean-field input rows must sum to 1")
    kernel = T.as_tensor(kernel, dtype=q.dtype)
    message = T.matmul(kernel, q)
    penalty = T.matmul(message, compat)
    return T.softmax(T.sub(unary, penalty), axis=-1)


def refine_attention(att: AttentionMap, g, params: CrfParams, compat: Tensor | None = None) -> Tensor:
    """Mean-field refinement of ``softmax(P)`` seeded and driven by the logits.

    ``g`` is one Guidance (or a precomputed kernel), or a list of them when the
    attention map carries a batch of frames.
    """
    P = att.logits
    q = T.softmax(P, axis=-1)
    if params.n_iters == 0:
        return q
    compat = compat if compat is not None else params.compat_for(att.K)
    kernel = _kernel_for(att, g, params)
    kernel = Tensor(kernel, dtype=P.dtype)
    for _ in range(params.n_iters):
        q = mean_field_step(q, P, kernel, compat)
    return q


def _kernel_for(att: AttentionMap, g, params: CrfParams) -> np.ndarray:
    def one(item) -> np.ndarray:
        if isinstance(item, Guidance):
            if (item.h, item.w) != (att.h, att.w):
                raise ShapeMismatchError(f"guidance {item.h}×{item.w} vs attention grid {att.h}×{att.w}")
            return pairwise_kernel(item, params)
        k = np.asarray(item)
        if k.shape != (att.M, att.M):
            raise ShapeMismatchError(f"kernel {k.shape} vs {att.M} positions")
        return k

    if att.logits.ndim == 3:
        items = list(g) if isinstance(g, (list, tuple)) else None
        if items is None:
            arr = np.asarray(g)
            if arr.ndim == 3:
                return arr
            raise ShapeMismatchError("a batched attention map needs one guidance per frame")
        if len(items) != att.logits.shape[0]:
            raise ShapeMismatchError(f"{len(items)} guidances for {att.logits.shape[0]} frames")
        return np.stack([one(it) for it in items])
    return one(g)


class CRF(Module):
    """Model-side holder of the CRF settings and the (optionally learnable) compatibility."""

    def __init__(self, K: int, params: CrfParams | None = None, learn_compat: bool = True):
        super().__init__()
        self.params = params or CrfParams()
        self.learn_compat = learn_compat
        self.compat = Parameter(potts(K), optimize=learn_compat)

    def forward(self, att: AttentionMap, g) -> Tensor:
        return refine_attention(att, g, self.params, self.compat)
