"""Three-branch temporal segmenter: shared backbone and encoder, LT/ST
cross-attention, temporal 3-d deconvolution head."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autograd as ag
from .attention import Transformer
from .autograd import DimensionError, Tensor
from .backbone import Backbone, BackboneConfig, ChannelReducer, flatten_tokens, unflatten_tokens
from .head import Decoder
from .nn import Module


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    widths: tuple = (8, 16, 32, 64)
    decoder_widths: tuple = (8, 16, 16, 32)
    out_width: int = 8
    heads: int = 4
    inner_dim: int = 64
    ffn_mult: int = 2
    head_mode: str = "sequential"

    def __post_init__(self):
        if len(self.widths) != len(self.decoder_widths):
            raise ValueError("decoder_widths needs one entry per backbone stage")
        if self.widths[-1] % self.heads:
            raise ValueError(f"{self.heads} heads do not divide {self.widths[-1]} channels")
        if self.image_size % (2 ** len(self.widths)):
            raise ValueError(f"image size {self.image_size} not divisible by {2 ** len(self.widths)}")

    @property
    def grid(self) -> int:
        return self.image_size // (2 ** len(self.widths))

    @property
    def channels(self) -> int:
        return self.widths[-1]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FrameFeatures:
    """Reduced skip maps (one per level) and encoded deepest-level tokens."""

    skips: list
    tokens: Tensor

    def detached(self) -> "FrameFeatures":
        return FrameFeatures([s.detach() for s in self.skips], self.tokens.detach())


@dataclass
class Reference:
    features: FrameFeatures
    mask: np.ndarray


class TemporalSegmenter(Module):
    def __init__(self, config: ModelConfig = ModelConfig(), seed: int = 0):
        rng = np.random.default_rng(seed)
        self._config = config
        self.backbone = Backbone(BackboneConfig(tuple(config.widths), (2,) * len(config.widths)), rng)
        self.reducer = ChannelReducer(config.widths, config.decoder_widths, rng)
        self.transformer = Transformer(config.channels, config.grid, config.heads, config.inner_dim,
                                       config.ffn_mult, rng)
        self.decoder = Decoder(config.decoder_widths, config.out_width, config.head_mode, rng)

    @property
    def config(self) -> ModelConfig:
        return self._config

    def token_mask(self, mask: np.ndarray) -> np.ndarray:
        """Foreground fraction of each token cell, shape (N, 1)."""
        g = self._config.grid
        m = np.asarray(mask, dtype=np.float64)
        cell = m.shape[0] // g
        return m.reshape(g, cell, g, cell).mean(axis=(1, 3)).reshape(-1, 1)

    def features(self, images) -> list[FrameFeatures]:
        """Backbone, channel reduction and encoder for a batch of (H, W) frames."""
        images = np.asarray(images, dtype=ag.get_default_dtype())
        if images.ndim == 2:
            images = images[None]
        s = self._config.image_size
        if images.shape[1:] != (s, s):
            raise DimensionError(f"model built for {s}x{s} frames, got {images.shape[1:]}")
        x = Tensor(images[:, None])
        pyramid = self.backbone.extract_features(x)
        tokens = self.transformer.encode(flatten_tokens(pyramid[-1]))
        skips = self.reducer.reduce_channels(pyramid)
        return [FrameFeatures([lvl[b] for lvl in skips], tokens[b]) for b in range(images.shape[0])]

    def predict(self, search: FrameFeatures, initial: Reference, intermediate: Reference,
                memory=()) -> Tensor:
        """Probability map (1, H, W) for the search frame.

        Long-term references are the initial frame plus ``memory`` entries;
        the short-term reference is ``intermediate``.
        """
        lt = [(r.features.tokens, self.token_mask(r.mask)) for r in (initial, *memory)]
        st = [(intermediate.features.tokens, self.token_mask(intermediate.mask))]
        fused = self.transformer.fuse_branches(search.tokens, lt, st)
        g, n = self._config.grid, len(self._config.widths)
        deep = self.reducer.reduce_level(n, unflatten_tokens(fused, g, g))
        return self.decoder.decode(initial.features.skips, intermediate.features.skips, search.skips, deep)

    def forward(self, search_image, initial_image, initial_mask, inter_image, inter_mask,
                memory_images=(), memory_masks=()) -> Tensor:
        """End-to-end prediction from raw frames; all branches share one batched backbone pass."""
        frames = [search_image, initial_image, inter_image, *memory_images]
        feats = self.features(np.stack(frames))
        memory = [Reference(f, m) for f, m in zip(feats[3:], memory_masks)]
        return self.predict(feats[0], Reference(feats[1], initial_mask), Reference(feats[2], inter_mask), memory)
