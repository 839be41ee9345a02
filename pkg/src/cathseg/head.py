"""Temporal 3-d deconvolution decoder.

At every pyramid level the initial, intermediate and search feature maps are
stacked with the previous stage's output along a new time axis (order fixed:
initial, intermediate, search, previous), the time axis is reduced to one,
and a transposed 3-d convolution doubles the spatial extent.
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import DimensionError, Tensor
from .nn import ChannelNorm, Conv, Module, he_normal, zeros

MODES = ("sequential", "joint")


class Conv3dWeights(Module):
    def __init__(self, rng, shape, fan_in: int, out_channels: int):
        self.weight = he_normal(rng, shape, fan_in)
        self.bias = zeros((out_channels, 1, 1, 1))


class DecoderStage(Module):
    """One fuse-and-upsample step.

    ``sequential``: (T,1,1) time reduction, then a (1,2,2) transposed
    convolution with spatial stride 2.  ``joint``: a (2,2,2) transposed
    convolution with stride 2 over (T,H,W), then a (2T,1,1) time reduction.
    """

    def __init__(self, rng, c_in: int, c_out: int, slices: int, mode: str = "sequential"):
        if mode not in MODES:
            raise ValueError(f"unknown decoder mode {mode!r}")
        self._mode, self._slices = mode, slices
        if mode == "sequential":
            self.treduce = Conv3dWeights(rng, (c_in, c_in, slices, 1, 1), c_in * slices, c_in)
            self.upconv = Conv3dWeights(rng, (c_in, c_out, 1, 2, 2), c_in, c_out)
        else:
            self.upconv = Conv3dWeights(rng, (c_in, c_out, 2, 2, 2), c_in * 2, c_out)
            self.treduce = Conv3dWeights(rng, (c_out, c_out, 2 * slices, 1, 1), c_out * 2 * slices, c_out)
        self.norm = ChannelNorm(c_out)

    @property
    def slices(self) -> int:
        return self._slices

    def __call__(self, stack: Tensor) -> Tensor:
        if stack.shape[1] != self._slices:
            raise DimensionError(f"stage expects {self._slices} time slices, got {stack.shape[1]}")
        if self._mode == "sequential":
            x = ag.add(ag.conv3d(stack, self.treduce.weight), self.treduce.bias)
            x = ag.add(ag.conv_transpose3d(x, self.upconv.weight, stride=(1, 2, 2)), self.upconv.bias)
        else:
            x = ag.add(ag.conv_transpose3d(stack, self.upconv.weight, stride=2), self.upconv.bias)
            x = ag.add(ag.conv3d(x, self.treduce.weight), self.treduce.bias)
        c, _, h, w = x.shape
        return ag.relu(self.norm(ag.reshape(x, (c, h, w))))


class Decoder(Module):
    """Stages ``stage<n>`` (deepest) to ``stage1`` followed by a 1x1 probability head.

    ``widths[l-1]`` is the reduced skip width at level ``l``; stage ``l``
    maps ``widths[l-1]`` channels to ``widths[l-2]`` (``out_width`` for
    stage 1).
    """

    def __init__(self, widths, out_width: int = 8, mode: str = "sequential", rng=None):
        rng = np.random.default_rng(0) if rng is None else rng
        self._widths = tuple(widths)
        n = len(widths)
        self.stages = {}
        for level in range(n, 0, -1):
            c_out = widths[level - 2] if level > 1 else out_width
            self.stages[f"stage{level}"] = DecoderStage(rng, widths[level - 1], c_out, 3 if level == n else 4, mode)
        self.head = Conv(rng, out_width, 1, k=1)

    @property
    def levels(self) -> int:
        return len(self._widths)

    def fuse_level(self, level: int, init_feat: Tensor, inter_feat: Tensor, search_feat: Tensor,
                   prev: Tensor | None = None) -> Tensor:
        maps = [init_feat, inter_feat, search_feat]
        if level < self.levels:
            if prev is None:
                raise DimensionError(f"level {level}: previous decoder output is required")
            maps.append(prev)
        elif prev is not None:
            raise DimensionError(f"level {level}: deepest stage takes no previous output")
        shapes = {m.shape for m in maps}
        if len(shapes) != 1:
            raise DimensionError(f"level {level}: misaligned maps {[m.shape for m in maps]}")
        return self.stages[f"stage{level}"](ag.stack(maps, axis=1))

    def decode(self, init_pyr, inter_pyr, search_pyr, deep_search: Tensor) -> Tensor:
        """Probability map (1, H, W) from three reduced pyramids and the transformer output."""
        n = self.levels
        if not len(init_pyr) == len(inter_pyr) == len(search_pyr) == n:
            raise DimensionError(f"decoder has {n} stages, pyramids have "
                                 f"{len(init_pyr)}/{len(inter_pyr)}/{len(search_pyr)} levels")
        prev = None
        for level in range(n, 0, -1):
            search = deep_search if level == n else search_pyr[level - 1]
            prev = self.fuse_level(level, init_pyr[level - 1], inter_pyr[level - 1], search, prev)
        return ag.sigmoid(self.head(prev))


def binarize(prob_map, threshold: float = 0.5) -> np.ndarray:
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold {threshold} outside (0, 1)")
    p = prob_map.data if isinstance(prob_map, Tensor) else np.asarray(prob_map)
    return (p >= threshold).astype(np.float32)
