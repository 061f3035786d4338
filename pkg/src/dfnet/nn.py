"""Parameter containers and the two layers every block is built from."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from dfnet import tensor as T
from dfnet.tensor import Tensor


class Parameter(Tensor):
    """A learnable leaf tensor.

    ``optimize`` marks whether the gradient optimizer may change it. Statistics
    maintained by other rules (the DFM scoring bank) set it to False.
    """

    __slots__ = ("optimize",)

    def __init__(self, data, optimize: bool = True, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.optimize = optimize


def kaiming_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Module:
    """Tree of parameters, buffers and sub-modules with train/eval state."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self._buffers:
            yield prefix + name, getattr(self, name)
        for name, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{name}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for child in self._children.values():
            yield from child.modules()

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        missing = (set(own) | set(bufs)) - set(state)
        unexpected = set(state) - set(own) - set(bufs)
        if strict and (missing or unexpected):
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, value in state.items():
            if name in own:
                p = own[name]
                if p.shape != np.shape(value):
                    raise ValueError(f"{name}: shape {np.shape(value)} != {p.shape}")
                p.data[...] = value
            elif name in bufs:
                bufs[name][...] = value

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        """Cast parameters and buffers in place (e.g. to float64 for gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        for m in self.modules():
            for name in list(m._buffers):
                value = getattr(m, name).astype(dtype)
                m._buffers[name] = value
                object.__setattr__(m, name, value)
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv2d(Module):
    """Channels-last convolution with Kaiming fan-in initialization."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        stride: int = 1,
        padding: int = 0,
        bias: bool = True,
        rng: np.random.Generator | None = None,
    ):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        k = kernel_size
        self.stride = stride
        self.padding = padding
        fan_in = k * k * in_channels
        self.weight = Parameter(kaiming_normal(rng, (k, k, in_channels, out_channels), fan_in))
        self.bias = Parameter(np.zeros(out_channels)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = T.conv2d(x, self.weight, self.stride, self.padding)
        if self.bias is not None:
            y = y + self.bias
        return y


class BatchNorm2d(Module):
    """Per-channel batch normalization with running statistics.

    With ``defer_stats`` set, training forwards leave the running buffers alone
    and record ``(mean, unbiased_var)`` on ``last_stats`` instead, so a
    data-parallel driver can fold synchronized statistics in itself.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.register_buffer("running_mean", np.zeros(channels, dtype=T.get_default_dtype()))
        self.register_buffer("running_var", np.ones(channels, dtype=T.get_default_dtype()))
        object.__setattr__(self, "defer_stats", False)
        object.__setattr__(self, "last_stats", None)

    def forward(self, x: Tensor) -> Tensor:
        if self.training and self.defer_stats:
            mu, var, n = T.batch_stats(x.data)
            object.__setattr__(self, "last_stats", (mu, var * (n / max(n - 1, 1))))
            return T.batchnorm2d(x, self.gamma, self.beta, None, None, True, self.momentum, self.eps)
        return T.batchnorm2d(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            self.training, self.momentum, self.eps,
        )

    def apply_stats(self, mean: np.ndarray, var_unbiased: np.ndarray) -> None:
        T.update_running_stats(self.running_mean, self.running_var, mean, var_unbiased, self.momentum)
