"""Layer building blocks on top of :mod:`simmil.numeric.tensor`."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Holds parameters (``Tensor`` with ``requires_grad``), buffers and sub-modules.

    Registration is attribute-driven: assigning a ``Tensor`` marked
    ``requires_grad`` registers a parameter, a ``Module`` registers a child,
    and names listed in ``_buffers`` are persisted state arrays.
    """

    training: bool = True

    def __init__(self):
        self._buffers: list[str] = []

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for name in getattr(self, "_buffers", []):
            yield prefix + name, getattr(self, name)
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict()
        for name, p in self.named_parameters():
            state[name] = p.data
        for name, b in self.named_buffers():
            state[name] = b
        return state

    def load_state_dict(self, state: dict, strict: bool = True) -> None:
        own = self.state_dict()
        if strict and set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for name, arr in own.items():
            if name not in state:
                continue
            src = np.asarray(state[name])
            if src.shape != arr.shape:
                raise ValueError(f"{name}: shape {src.shape} != {arr.shape}")
            arr[...] = src

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        """Cast all parameters and buffers in place (used for float64 gradient checks)."""
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        for name in getattr(self, "_buffers", []):
            setattr(self, name, getattr(self, name).astype(dtype))
        for _, child in self.children():
            child.astype(dtype)
        return self


def _param(arr: np.ndarray) -> Tensor:
    return Tensor(arr.astype(T.DEFAULT_DTYPE), requires_grad=True)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        bound = 1.0 / np.sqrt(in_features)
        self.weight = _param(rng.uniform(-bound, bound, size=(in_features, out_features)))
        self.bias = _param(rng.uniform(-bound, bound, size=(out_features,))) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = x @ self.weight
        return out + self.bias if self.bias is not None else out


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 rng: np.random.Generator, stride: int = 1, padding: int = 0):
        super().__init__()
        fan_in = in_channels * kernel_size * kernel_size
        std = np.sqrt(2.0 / fan_in)
        self.weight = _param(rng.normal(0.0, std, size=(out_channels, in_channels, kernel_size, kernel_size)))
        self.bias = _param(np.zeros(out_channels))
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class BatchNorm(Module):
    """Batch normalisation over axis 1 for 2-D (B, F) or 4-D (B, C, H, W) input."""

    def __init__(self, num_features: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.gamma = _param(np.ones(num_features))
        self.beta = _param(np.zeros(num_features))
        self.running_mean = np.zeros(num_features, dtype=T.DEFAULT_DTYPE)
        self.running_var = np.ones(num_features, dtype=T.DEFAULT_DTYPE)
        self._buffers = ["running_mean", "running_var"]
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            training=self.training, momentum=self.momentum, eps=self.eps)
