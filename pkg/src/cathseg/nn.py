"""Parameter containers shared by the model components."""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor


class Module:
    """Base class that names learnable tensors by attribute path.

    Tensor attributes with ``requires_grad`` are parameters; ``Module``
    attributes recurse with ``<attr>/``; ``dict`` attributes recurse with
    ``<key>/`` (the attribute name itself is dropped), which lets a module
    expose children such as ``stage1`` or ``head0`` directly.
    """

    def named_parameters(self, prefix: str = "", exclude=()):
        for key, val in vars(self).items():
            if key.startswith("_") or key in exclude:
                continue
            if isinstance(val, Tensor):
                if val.requires_grad:
                    yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(prefix + key + "/")
            elif isinstance(val, dict):
                for k, v in val.items():
                    if isinstance(v, Module):
                        yield from v.named_parameters(f"{prefix}{k}/")
                    elif isinstance(v, Tensor) and v.requires_grad:
                        yield f"{prefix}{k}", v

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, arrays: dict, strict: bool = True) -> None:
        named = dict(self.named_parameters())
        if strict:
            missing = sorted(set(named) - set(arrays))
            if missing:
                raise KeyError(f"missing parameters: {missing[:5]}")
        for name, p in named.items():
            if name in arrays:
                arr = np.asarray(arrays[name])
                if arr.shape != p.shape:
                    raise ag.DimensionError(f"{name}: stored shape {arr.shape}, expected {p.shape}")
                p.data = arr.astype(p.dtype, copy=True)


def param(values) -> Tensor:
    return Tensor(values, requires_grad=True)


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    return param(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape))


def xavier(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> Tensor:
    return param(rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=shape))


def zeros(shape) -> Tensor:
    return param(np.zeros(shape))


def ones(shape) -> Tensor:
    return param(np.ones(shape))


class Conv(Module):
    """2-d convolution weights with a per-channel bias."""

    def __init__(self, rng, c_in: int, c_out: int, k: int = 3, stride: int = 1, padding: int | None = None):
        self.weight = he_normal(rng, (c_out, c_in, k, k), c_in * k * k)
        self.bias = zeros((c_out, 1, 1))
        self._stride = stride
        self._padding = k // 2 if padding is None else padding

    def __call__(self, x: Tensor) -> Tensor:
        return ag.conv2d(x, self.weight, self._stride, self._padding) + self.bias


class ChannelNorm(Module):
    """Layer normalisation across the channel axis of ``(..., C, H, W)`` maps."""

    def __init__(self, channels: int):
        self.weight = ones((channels, 1, 1))
        self.bias = zeros((channels, 1, 1))

    def __call__(self, x: Tensor) -> Tensor:
        return ag.layer_norm(x, axis=-3, weight=self.weight, bias=self.bias)


class TokenNorm(Module):
    """Layer normalisation across the channel axis of ``(..., N, C)`` tokens."""

    def __init__(self, channels: int):
        self.weight = ones((channels,))
        self.bias = zeros((channels,))

    def __call__(self, x: Tensor) -> Tensor:
        return ag.layer_norm(x, axis=-1, weight=self.weight, bias=self.bias)


class Linear(Module):
    def __init__(self, rng, c_in: int, c_out: int):
        self.weight = xavier(rng, (c_in, c_out), c_in, c_out)
        self.bias = zeros((c_out,))

    def __call__(self, x: Tensor) -> Tensor:
        return ag.matmul(x, self.weight) + self.bias
