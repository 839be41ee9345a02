"""Strided convolutional feature extractor with a four-level pyramid."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import DimensionError, Tensor
from .nn import ChannelNorm, Conv, Module, param

FeaturePyramid = list  # levels L1..Ln, each (C_l, H/2^l, W/2^l) or batched (B, C_l, ...)


@dataclass(frozen=True)
class BackboneConfig:
    widths: tuple = (8, 16, 32, 64)
    strides: tuple = (2, 2, 2, 2)
    in_channels: int = 1

    def __post_init__(self):
        if len(self.widths) != len(self.strides):
            raise ValueError("one stride per stage is required")

    @property
    def downsampling(self) -> int:
        return int(np.prod(self.strides))


class Stage(Module):
    """conv(stride) -> norm -> relu -> conv -> norm -> relu."""

    def __init__(self, rng, c_in: int, c_out: int, stride: int):
        self.conv1 = Conv(rng, c_in, c_out, 3, stride)
        self.norm1 = ChannelNorm(c_out)
        self.conv2 = Conv(rng, c_out, c_out, 3, 1)
        self.norm2 = ChannelNorm(c_out)

    def __call__(self, x: Tensor) -> Tensor:
        x = ag.relu(self.norm1(self.conv1(x)))
        return ag.relu(self.norm2(self.conv2(x)))


class Backbone(Module):
    def __init__(self, config: BackboneConfig = BackboneConfig(), rng=None):
        rng = np.random.default_rng(0) if rng is None else rng
        self._config = config
        c = config.in_channels
        self.stages = {}
        for k, (w, s) in enumerate(zip(config.widths, config.strides), start=1):
            self.stages[f"stage{k}"] = Stage(rng, c, w, s)
            c = w

    @property
    def config(self) -> BackboneConfig:
        return self._config

    def extract_features(self, image) -> FeaturePyramid:
        """Run the stages on ``(1, H, W)`` or batched ``(B, 1, H, W)`` images."""
        x = image if isinstance(image, Tensor) else Tensor(image)
        h, w = x.shape[-2:]
        f = self._config.downsampling
        if h % f or w % f:
            raise DimensionError(f"input {h}x{w} is not divisible by the downsampling factor {f}")
        levels = []
        for stage in self.stages.values():
            x = stage(x)
            levels.append(x)
        return levels

    __call__ = extract_features


class ChannelReducer(Module):
    """Per-level 1x1 convolutions mapping backbone widths to decoder widths."""

    def __init__(self, in_widths, out_widths, rng=None):
        rng = np.random.default_rng(0) if rng is None else rng
        if len(in_widths) != len(out_widths):
            raise ValueError("reducer needs one output width per pyramid level")
        self._in = tuple(in_widths)
        self._out = tuple(out_widths)
        self.levels = {}
        for k, (ci, co) in enumerate(zip(in_widths, out_widths), start=1):
            self.levels[f"level{k}"] = Conv(rng, ci, co, k=1)

    @property
    def out_widths(self) -> tuple:
        return self._out

    def reduce_level(self, k: int, x: Tensor) -> Tensor:
        """Reduce a single map belonging to pyramid level ``k`` (1-based)."""
        expected = self._in[k - 1]
        if x.shape[-3] != expected:
            raise DimensionError(f"level {k}: got {x.shape[-3]} channels, reducer expects {expected}")
        return self.levels[f"level{k}"](x)

    def reduce_channels(self, pyramid: FeaturePyramid) -> FeaturePyramid:
        if len(pyramid) != len(self._in):
            raise DimensionError(f"pyramid has {len(pyramid)} levels, reducer has {len(self._in)}")
        return [self.reduce_level(k, x) for k, x in enumerate(pyramid, start=1)]

    __call__ = reduce_channels

    def set_identity(self) -> None:
        """Identity kernels (requires matching widths) with zero bias."""
        for k, conv in enumerate(self.levels.values()):
            if self._in[k] != self._out[k]:
                raise DimensionError(f"level {k + 1}: widths {self._in[k]} -> {self._out[k]} cannot be identity")
            n = self._in[k]
            conv.weight = param(np.eye(n).reshape(n, n, 1, 1))
            conv.bias = param(np.zeros((n, 1, 1)))


def flatten_tokens(level: Tensor) -> Tensor:
    """``(C, h, w) -> (h*w, C)``; row ``i`` is site ``(i // w, i % w)``."""
    *lead, c, h, w = level.shape
    x = ag.reshape(level, (*lead, c, h * w))
    return ag.swapaxes(x, -1, -2)


def unflatten_tokens(tokens: Tensor, h: int, w: int) -> Tensor:
    """Inverse of :func:`flatten_tokens`."""
    *lead, n, c = tokens.shape
    if n != h * w:
        raise DimensionError(f"{n} tokens cannot fill a {h}x{w} map")
    return ag.reshape(ag.swapaxes(tokens, -1, -2), (*lead, c, h, w))
