"""Minimal dense tensor with reverse-mode automatic differentiation.

Tensors wrap a numpy array. Every differentiable op records its parents and a
closure that maps the output gradient to parent gradients; ``Tensor.backward``
walks the recorded graph in reverse topological order.

Compute is float32 by default. Gradient verification needs float64, which is
enabled with :func:`float64_mode`.
"""

from __future__ import annotations

import contextlib
import struct
import threading
from dataclasses import dataclass
from typing import BinaryIO, Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from dfnet.errors import (
    InvalidAxisError,
    KernelTooLargeError,
    MalformedFileError,
    NonFiniteGradientError,
    ShapeMismatchError,
)

_DEFAULT_DTYPE = np.dtype(np.float32)


class _GradMode(threading.local):
    # per thread: a no_grad block in one data-parallel worker must not stop another from recording
    enabled = True


_GRAD = _GradMode()


def is_grad_enabled() -> bool:
    return _GRAD.enabled


def get_default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def float64_mode():
    """Create tensors in float64 inside the block (verification mode)."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(np.float64)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def no_grad():
    previous = _GRAD.enabled
    _GRAD.enabled = False
    try:
        yield
    finally:
        _GRAD.enabled = previous


class Tensor:
    """Dense row-major float array with an optional gradient."""

    __array_priority__ = 100
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=dtype or _DEFAULT_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple["Tensor", ...], backward) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        needs = _GRAD.enabled and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        out._parents = parents if needs else ()
        out._backward = backward if needs else None
        return out

    # -- introspection ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- autodiff --------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeMismatchError(
                    f"backward() without an explicit gradient needs a scalar, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- operators -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=like.dtype)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    _check_broadcast(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    _check_broadcast(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    _check_broadcast(a, b, "mul")

    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return Tensor._from_op(ad * bd, (a, b), backward)


def div(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    _check_broadcast(a, b, "div")
    bd = b.data
    out = a.data / bd

    def backward(g):
        return _unbroadcast(g / bd, a.shape), _unbroadcast(-g * out / bd, b.shape)

    return Tensor._from_op(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._from_op(np.log(ad), (a,), lambda g: (g / ad,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._from_op(np.maximum(a.data, 0), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    return Tensor._from_op(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a: Tensor) -> Tensor:
    """``log(1 + exp(x))`` without overflow."""
    x = a.data
    out = (np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))).astype(x.dtype, copy=False)
    e = np.exp(-np.abs(x))
    sig = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    return Tensor._from_op(out, (a,), lambda g: (g * sig,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return Tensor._from_op(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# shape manipulation and reductions


def _normalize_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise InvalidAxisError(f"axis {axis} is out of range for a tensor of rank {ndim}")
    return axis % ndim


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeMismatchError(f"cannot reshape {a.shape} into {shape}") from None
    return Tensor._from_op(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor._from_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if isinstance(axis, int):
        axis = _normalize_axis(axis, a.ndim)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._from_op(np.asarray(out), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[_normalize_axis(ax, a.ndim)] for ax in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis``; gradients scatter-add back."""
    axis = _normalize_axis(axis, a.ndim)
    idx = np.asarray(indices, dtype=np.intp)
    out = np.take(a.data, idx, axis=axis)

    def backward(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (full,)

    return Tensor._from_op(out, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeMismatchError("concat of an empty sequence")
    axis = _normalize_axis(axis, tensors[0].ndim)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeMismatchError(f"concat along axis {axis}: incompatible shapes {shapes}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._from_op(out, tuple(tensors), backward)


def flip(a: Tensor, axis: int) -> Tensor:
    axis = _normalize_axis(axis, a.ndim)
    return Tensor._from_op(np.flip(a.data, axis).copy(), (a,), lambda g: (np.flip(g, axis).copy(),))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching semantics on leading dimensions."""
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeMismatchError(f"matmul: shapes {a.shape} and {b.shape} are not aligned") from None
    ad, bd = a.data, b.data

    def backward(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(ad, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return Tensor._from_op(out, (a, b), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _normalize_axis(axis, x.ndim)
    # normalized in float64 so each slice sums to 1 within one rounding of the output dtype
    x64 = x.data.astype(np.float64)
    e = np.exp(x64 - x64.max(axis=axis, keepdims=True))
    out = (e / e.sum(axis=axis, keepdims=True)).astype(x.dtype)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(out, (x,), backward)


# ---------------------------------------------------------------------------
# convolution, normalization, resampling


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim == 4:
        return x, False
    raise ShapeMismatchError(f"expected an H×W×C or N×H×W×C tensor, got shape {x.shape}")


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over channels-last input.

    ``x`` is H×W×Cin (or N×H×W×Cin), ``kernel`` is kh×kw×Cin×Cout.
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    xb, squeeze = _batched(x)
    n, h, w, cin = xb.shape
    if kernel.ndim != 4 or kernel.shape[2] != cin:
        raise ShapeMismatchError(f"conv2d: kernel {kernel.shape} does not match input {x.shape}")
    kh, kw, _, cout = kernel.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise KernelTooLargeError(
            f"conv2d: kernel {kh}×{kw} is larger than padded input {hp}×{wp}"
        )
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    xd = xb.data
    wmat = kernel.data.reshape(kh * kw * cin, cout)

    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        cols = xd.reshape(-1, cin)
        out = (cols @ wmat).reshape(n, ho, wo, cout)

        def backward(g):
            g2 = g.reshape(-1, cout)
            gx = (g2 @ wmat.T).reshape(xd.shape) if xb.requires_grad else None
            gk = (cols.T @ g2).reshape(kernel.shape) if kernel.requires_grad else None
            return gx, gk

        res = Tensor._from_op(out, (xb, kernel), backward)
        return reshape(res, res.shape[1:]) if squeeze else res

    xp = np.pad(xd, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else xd
    xp = np.ascontiguousarray(xp)
    s0, s1, s2, s3 = xp.strides
    windows = as_strided(
        xp,
        shape=(n, ho, wo, kh, kw, cin),
        strides=(s0, s1 * stride, s2 * stride, s1, s2, s3),
        writeable=False,
    )
    cols = windows.reshape(n * ho * wo, kh * kw * cin)
    out = (cols @ wmat).reshape(n, ho, wo, cout)

    def backward(g):
        g2 = g.reshape(-1, cout)
        gk = (cols.T @ g2).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if xb.requires_grad:
            gcols = (g2 @ wmat.T).reshape(n, ho, wo, kh, kw, cin)
            gxp = np.zeros(xp.shape, dtype=xp.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride, :] += gcols[:, :, :, i, j, :]
            gx = gxp[:, padding : padding + h, padding : padding + w, :] if padding else gxp
        return gx, gk

    res = Tensor._from_op(out, (xb, kernel), backward)
    return reshape(res, res.shape[1:]) if squeeze else res


def batch_stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, int]:
    """Per-channel mean, biased variance and sample count over all but the last axis."""
    axes = tuple(range(x.ndim - 1))
    n = int(np.prod([x.shape[a] for a in axes]))
    mu = x.mean(axis=axes)
    var = ((x - mu) ** 2).mean(axis=axes)
    return mu, var, n


def update_running_stats(
    running_mean: np.ndarray,
    running_var: np.ndarray,
    batch_mean: np.ndarray,
    batch_var_unbiased: np.ndarray,
    momentum: float,
) -> None:
    """In-place ``r <- (1 - momentum) * r + momentum * batch``."""
    running_mean *= 1.0 - momentum
    running_mean += momentum * batch_mean
    running_var *= 1.0 - momentum
    running_var += momentum * batch_var_unbiased


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray | None = None,
    running_var: np.ndarray | None = None,
    training: bool = True,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Batch normalization over every axis except the trailing channel axis.

    In training mode the batch statistics normalize the input and, when running
    buffers are passed, are folded into them with
    ``r <- (1 - momentum) * r + momentum * stat`` (unbiased variance). In eval
    mode the running buffers are used and the op is a fixed affine map.
    """
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeMismatchError(f"batchnorm2d: affine params {gamma.shape}/{beta.shape} vs {c} channels")
    xd = x.data
    if training:
        mu, var, n = batch_stats(xd)
        if running_mean is not None and running_var is not None:
            unbiased = var * (n / max(n - 1, 1))
            update_running_stats(running_mean, running_var, mu, unbiased.astype(var.dtype), momentum)
    else:
        if running_mean is None or running_var is None:
            raise ValueError("batchnorm2d in eval mode needs running statistics")
        mu, var = running_mean.astype(xd.dtype), running_var.astype(xd.dtype)
        n = None
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * invstd
    gd = gamma.data
    out = xhat * gd + beta.data
    axes = tuple(range(xd.ndim - 1))

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        dxhat = g * gd
        if training:
            gx = invstd / n * (
                n * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes)
            )
        else:
            gx = dxhat * invstd
        return gx, ggamma, gbeta

    return Tensor._from_op(out, (x, gamma, beta), backward)


def _interp_matrix(n_out: int, n_in: int, dtype) -> np.ndarray:
    """Half-pixel-centred linear interpolation weights, edges clamped."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    t = src - i0
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - t)
    np.add.at(m, (rows, i1), t)
    return m.astype(dtype)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of an H×W×C (or N×H×W×C) tensor.

    Uses half-pixel sample centres without anti-aliasing, so resizing to the
    same size is exactly the identity.
    """
    if out_h < 1 or out_w < 1:
        raise ShapeMismatchError(f"bilinear_resize: invalid output size {out_h}×{out_w}")
    xb, squeeze = _batched(x)
    n, h, w, c = xb.shape
    if (h, w) == (out_h, out_w):
        return x * 1.0
    ah = _interp_matrix(out_h, h, xb.dtype)
    aw = _interp_matrix(out_w, w, xb.dtype)
    xt = xb.data.transpose(0, 3, 1, 2)
    out = (ah @ xt @ aw.T).transpose(0, 2, 3, 1)

    def backward(g):
        gt = g.transpose(0, 3, 1, 2)
        return ((ah.T @ gt @ aw).transpose(0, 2, 3, 1),)

    res = Tensor._from_op(np.ascontiguousarray(out), (xb,), backward)
    return reshape(res, res.shape[1:]) if squeeze else res


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    op_name: str
    max_rel_error: float
    passed: bool
    tolerance: float


def grad_check(
    op: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    tolerance: float = 1e-4,
    step: float = 1e-5,
    op_name: str | None = None,
) -> GradCheckReport:
    """Compare analytic gradients of ``op`` with central finite differences.

    ``op`` is called as ``op(*inputs)``; a non-scalar result is reduced by sum.
    Inputs must be float64. The error for each element is
    ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    inputs = list(inputs)
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("grad_check needs float64 inputs; build them under float64_mode()")

    def scalar() -> Tensor:
        out = op(*inputs)
        return out if out.size == 1 else tsum(out)

    saved = [t.requires_grad for t in inputs]
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = scalar()
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    for t in inputs:
        t.grad = None

    worst = 0.0
    with no_grad():
        for t, a in zip(inputs, analytic):
            if not np.all(np.isfinite(a)):
                raise NonFiniteGradientError(f"analytic gradient of {op_name or 'op'} is not finite")
            flat = t.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                fp = scalar().item()
                flat[i] = orig - step
                fm = scalar().item()
                flat[i] = orig
                num = (fp - fm) / (2.0 * step)
                if not np.isfinite(num):
                    raise NonFiniteGradientError(f"numeric gradient of {op_name or 'op'} is not finite")
                ana = a.reshape(-1)[i]
                err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
                worst = max(worst, err)
    for t, flag in zip(inputs, saved):
        t.requires_grad = flag
    name = op_name or getattr(op, "__name__", "op")
    return GradCheckReport(name, float(worst), worst <= tolerance, tolerance)


# ---------------------------------------------------------------------------
# DFT1 serialization

_MAGIC = b"DFT1"


def write_dft(f: BinaryIO, array) -> None:
    """Write one tensor: magic, u32 rank, u32 dims, little-endian f32 payload."""
    arr = np.asarray(array.data if isinstance(array, Tensor) else array)
    f.write(_MAGIC)
    f.write(struct.pack("<I", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def dft_bytes(array) -> bytes:
    import io

    buf = io.BytesIO()
    write_dft(buf, array)
    return buf.getvalue()


def parse_dft(blob: bytes) -> np.ndarray:
    if len(blob) < 4 or blob[:4] != _MAGIC:
        raise MalformedFileError("missing DFT1 magic", 0)
    if len(blob) < 8:
        raise MalformedFileError("truncated rank field", 4)
    (rank,) = struct.unpack_from("<I", blob, 4)
    header_end = 8 + 4 * rank
    if len(blob) < header_end:
        raise MalformedFileError(f"truncated shape field for rank {rank}", 8)
    dims = struct.unpack_from(f"<{rank}I", blob, 8)
    count = int(np.prod(dims)) if rank else 1
    if any(d == 0 for d in dims):
        raise MalformedFileError(f"zero dimension in shape {dims}", 8)
    expected = header_end + 4 * count
    if len(blob) != expected:
        raise MalformedFileError(
            f"payload size mismatch: expected {expected} bytes, found {len(blob)}",
            min(len(blob), expected),
        )
    return np.frombuffer(blob, dtype="<f4", count=count, offset=header_end).reshape(dims).astype(np.float32)


def save_tensor(path, array) -> None:
    with open(path, "wb") as f:
        write_dft(f, array)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        return parse_dft(f.read())


def parameters_finite(tensors: Iterable[Tensor]) -> bool:
    return all(np.all(np.isfinite(t.data)) for t in tensors)
