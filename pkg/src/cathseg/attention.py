"""Attention-in-attention and the three-branch transformer.

Shapes: token sets are ``(..., N, C)``; per-head attention maps are
``(..., h, N_q, N_k)``.  The inner attention treats each *column* of a map
(one key's correlation with every query) as a token of width ``D = N_q``,
so its weights depend on the query count only and the key count is free to
grow when memory frames are concatenated.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import ContractError, DimensionError, Tensor
from .nn import Linear, Module, TokenNorm, param, xavier

_PROJ = ("wq", "wk", "wv", "wo")


class AttentionWeights(Module):
    """Multi-head projections: per head ``wq, wk, wv`` are (C, C/h) and ``wo`` is (C/h, C).

    Concatenating the heads column-wise gives the usual (C, C) matrices.
    """

    def __init__(self, channels: int, heads: int = 4, rng=None):
        if channels % heads:
            raise ValueError(f"{heads} heads do not divide {channels} channels")
        rng = np.random.default_rng(0) if rng is None else rng
        self._channels, self._heads = channels, heads
        d = channels // heads
        self.wq = [xavier(rng, (channels, d), channels, channels) for _ in range(heads)]
        self.wk = [xavier(rng, (channels, d), channels, channels) for _ in range(heads)]
        self.wv = [xavier(rng, (channels, d), channels, channels) for _ in range(heads)]
        self.wo = [xavier(rng, (d, channels), channels, channels) for _ in range(heads)]

    @classmethod
    def identity(cls, channels: int, heads: int = 1) -> "AttentionWeights":
        w = cls(channels, heads)
        d = channels // heads
        eye = np.eye(channels)
        for i in range(heads):
            block = eye[:, i * d:(i + 1) * d]
            w.wq[i], w.wk[i], w.wv[i] = param(block), param(block), param(block)
            w.wo[i] = param(block.T)
        return w

    @property
    def channels(self) -> int:
        return self._channels

    @property
    def heads(self) -> int:
        return self._heads

    def stacked(self, name: str) -> Tensor:
        return ag.stack(getattr(self, name), axis=0)

    def named_parameters(self, prefix: str = "", exclude=()):
        for i in range(self._heads):
            for n in _PROJ:
                yield f"{prefix}head{i}/{n}", getattr(self, n)[i]


class InnerAttentionWeights(Module):
    """Per-head inner projections over attention-map columns.

    ``wq, wk``: (D, P) with P the reduced query/key width (64 by default);
    ``wv, wo``: (D, D).  ``D`` is the attention-map height (query count).
    """

    def __init__(self, height: int, proj: int = 64, heads: int = 4, rng=None):
        rng = np.random.default_rng(0) if rng is None else rng
        self._height, self._proj, self._heads = height, proj, heads
        self.wq = [xavier(rng, (height, proj), height, proj) for _ in range(heads)]
        self.wk = [xavier(rng, (height, proj), height, proj) for _ in range(heads)]
        self.wv = [xavier(rng, (height, height), height, height) for _ in range(heads)]
        self.wo = [param(np.zeros((height, height))) for _ in range(heads)]

    @property
    def height(self) -> int:
        return self._height

    @property
    def heads(self) -> int:
        return self._heads

    def stacked(self, name: str) -> Tensor:
        return ag.stack(getattr(self, name), axis=0)

    def zero_value_path(self) -> None:
        """Make the inner module output exactly zero (``wv = 0``)."""
        self.wv = [param(np.zeros((self._height, self._height))) for _ in range(self._heads)]

    def named_parameters(self, prefix: str = "", exclude=()):
        for i in range(self._heads):
            for n in _PROJ:
                yield f"{prefix}head{i}/{n}", getattr(self, n)[i]


def aia_named_parameters(prefix: str, attn: AttentionWeights, inner: InnerAttentionWeights):
    """Names ``head<i>/{wq,wk,wv,wo}`` and ``head<i>/inner/{wq,wk,wv,wo}``."""
    for i in range(attn.heads):
        for n in _PROJ:
            yield f"{prefix}head{i}/{n}", getattr(attn, n)[i]
        for n in _PROJ:
            yield f"{prefix}head{i}/inner/{n}", getattr(inner, n)[i]


def _split_heads(x: Tensor) -> Tensor:
    return ag.reshape(x, (*x.shape[:-2], 1, *x.shape[-2:]))


def _check_widths(q: Tensor, k: Tensor, v: Tensor, weights: AttentionWeights) -> None:
    c = weights.channels
    if q.shape[-1] != c or k.shape[-1] != c or v.shape[-1] != c:
        raise DimensionError(f"attention expects width {c}, got q{q.shape} k{k.shape} v{v.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"keys {k.shape} and values {v.shape} differ in token count")


def attention_map(q: Tensor, k: Tensor, weights: AttentionWeights) -> Tensor:
    """Per-head scores ``M = (Q Wq)(K Wk)^T / sqrt(C/h)`` of shape (..., h, N_q, N_k)."""
    qb = ag.matmul(_split_heads(q), weights.stacked("wq"))
    kb = ag.matmul(_split_heads(k), weights.stacked("wk"))
    d = weights.channels // weights.heads
    return ag.mul(ag.matmul(qb, ag.swapaxes(kb)), 1.0 / math.sqrt(d))


def _mix_values(logits: Tensor, v: Tensor, weights: AttentionWeights) -> Tensor:
    vb = ag.matmul(_split_heads(v), weights.stacked("wv"))
    heads = ag.matmul(ag.softmax(logits, axis=-1), vb)
    return ag.sum(ag.matmul(heads, weights.stacked("wo")), axis=-3)


def dot_product_attention(q: Tensor, k: Tensor, v: Tensor, weights: AttentionWeights):
    """``softmax(M) V Wv`` per head, heads concatenated and projected by ``Wo``.

    Returns ``(output, M)`` with ``output`` of shape (..., N_q, C).
    """
    _check_widths(q, k, v, weights)
    m = attention_map(q, k, weights)
    return _mix_values(m, v, weights), m


def inner_attention(m: Tensor, weights: InnerAttentionWeights) -> Tensor:
    """Attention among the columns of ``m``; output is shaped like ``m``.

    ``out = A' V' + A' V' Wo'`` where ``A' = softmax(Q' K'^T / sqrt(D))`` and
    ``Q' = cols Wq'``, ``K' = cols Wk'``, ``V' = cols Wv'``.
    """
    if m.shape[-2] != weights.height:
        raise ContractError(f"attention map height {m.shape[-2]} != inner width {weights.height}")
    if m.shape[-3] != weights.heads:
        raise ContractError(f"attention map has {m.shape[-3]} heads, inner weights {weights.heads}")
    cols = ag.swapaxes(m)
    q = ag.matmul(cols, weights.stacked("wq"))
    k = ag.matmul(cols, weights.stacked("wk"))
    v = ag.matmul(cols, weights.stacked("wv"))
    scores = ag.mul(ag.matmul(q, ag.swapaxes(k)), 1.0 / math.sqrt(weights.height))
    mixed = ag.matmul(ag.softmax(scores, axis=-1), v)
    out = ag.add(mixed, ag.matmul(mixed, weights.stacked("wo")))
    return ag.swapaxes(out)


def aia_attention(q: Tensor, k: Tensor, v: Tensor, weights: AttentionWeights,
                  inner: InnerAttentionWeights):
    """``softmax(M + InnerAttn(M)) V Wv``, heads projected by ``Wo``; returns ``(output, M)``."""
    _check_widths(q, k, v, weights)
    m = attention_map(q, k, weights)
    return _mix_values(ag.add(m, inner_attention(m, inner)), v, weights), m


def sine_positions(h: int, w: int, channels: int) -> np.ndarray:
    """Fixed 2-d sinusoidal encodings, (h*w, channels); half the channels per axis."""
    if channels % 4:
        raise ValueError("positional encodings need channels divisible by 4")
    quarter = channels // 4
    freqs = 1.0 / (10000.0 ** (np.arange(quarter) / quarter))
    ys, xs = np.mgrid[0:h, 0:w]
    ys = (ys.reshape(-1, 1) + 0.5) / h * 2 * np.pi
    xs = (xs.reshape(-1, 1) + 0.5) / w * 2 * np.pi
    return np.concatenate([np.sin(ys * freqs), np.cos(ys * freqs), np.sin(xs * freqs), np.cos(xs * freqs)], axis=1)


class EncoderLayer(Module):
    """AiA self-attention and a feed-forward block, each with residual + layer norm."""

    def __init__(self, channels: int, tokens: int, heads: int = 4, inner_dim: int = 64,
                 ffn_mult: int = 2, rng=None):
        rng = np.random.default_rng(0) if rng is None else rng
        self.attn = AttentionWeights(channels, heads, rng)
        self.inner = InnerAttentionWeights(tokens, inner_dim, heads, rng)
        self.norm1 = TokenNorm(channels)
        self.ffn1 = Linear(rng, channels, ffn_mult * channels)
        self.ffn2 = Linear(rng, ffn_mult * channels, channels)
        self.norm2 = TokenNorm(channels)

    def named_parameters(self, prefix: str = "", exclude=()):
        yield from aia_named_parameters(prefix, self.attn, self.inner)
        yield from super().named_parameters(prefix, exclude=("attn", "inner"))

    def __call__(self, tokens: Tensor, pos) -> Tensor:
        qk = ag.add(tokens, pos)
        a, _ = aia_attention(qk, qk, tokens, self.attn, self.inner)
        x = self.norm1(ag.add(tokens, a))
        return self.norm2(ag.add(x, self.ffn2(ag.relu(self.ffn1(x)))))


class CrossAttention(Module):
    """AiA cross-attention from search tokens to a reference token set."""

    def __init__(self, channels: int, tokens: int, heads: int = 4, inner_dim: int = 64, rng=None):
        rng = np.random.default_rng(0) if rng is None else rng
        self.attn = AttentionWeights(channels, heads, rng)
        self.inner = InnerAttentionWeights(tokens, inner_dim, heads, rng)
        self.norm = TokenNorm(channels)

    def named_parameters(self, prefix: str = "", exclude=()):
        yield from aia_named_parameters(prefix, self.attn, self.inner)
        yield from super().named_parameters(prefix, exclude=("attn", "inner"))

    def __call__(self, search: Tensor, search_pos, keys: Tensor, key_pos, values: Tensor) -> Tensor:
        if keys.shape[-2] == 0:
            raise ContractError("cross-attention needs at least one reference token")
        a, _ = aia_attention(ag.add(search, search_pos), ag.add(keys, key_pos), values, self.attn, self.inner)
        return self.norm(ag.add(search, a))


class Transformer(Module):
    """Shared encoder, long-term and short-term cross-attention, and their fusion.

    Reference sets are sequences of ``(tokens, mask_weights)`` pairs where
    ``mask_weights`` is the (N, 1) foreground fraction of each token's cell;
    a learned foreground/background embedding is added to reference values.
    """

    def __init__(self, channels: int, grid: int, heads: int = 4, inner_dim: int = 64,
                 ffn_mult: int = 2, rng=None):
        rng = np.random.default_rng(0) if rng is None else rng
        n = grid * grid
        self._grid = grid
        self._pos = Tensor(sine_positions(grid, grid, channels))
        self.encoder = EncoderLayer(channels, n, heads, inner_dim, ffn_mult, rng)
        self.lt = CrossAttention(channels, n, heads, inner_dim, rng)
        self.st = CrossAttention(channels, n, heads, inner_dim, rng)
        self.fuse = Linear(rng, 2 * channels, channels)
        self.ffn1 = Linear(rng, channels, ffn_mult * channels)
        self.ffn2 = Linear(rng, ffn_mult * channels, channels)
        self.norm = TokenNorm(channels)
        self.mask_fg = param(rng.normal(0.0, 0.5, size=channels))
        self.mask_bg = param(rng.normal(0.0, 0.5, size=channels))

    @property
    def positions(self) -> Tensor:
        return self._pos

    def encode(self, tokens: Tensor, pos=None) -> Tensor:
        """Self-attention encoding; the same weights serve every branch."""
        return self.encoder(tokens, self._pos if pos is None else pos)

    def reference_values(self, tokens: Tensor, mask_weights) -> Tensor:
        m = Tensor(np.asarray(mask_weights).reshape(-1, 1), dtype=tokens.dtype)
        emb = ag.add(ag.mul(m, self.mask_fg), ag.mul(ag.sub(1.0, m), self.mask_bg))
        return ag.add(tokens, emb)

    def _reference_set(self, refs):
        refs = list(refs)
        if not refs:
            raise ContractError("empty reference set")
        keys = ag.concat([t for t, _ in refs], axis=-2)
        values = ag.concat([self.reference_values(t, m) for t, m in refs], axis=-2)
        pos = Tensor(np.tile(self._pos.data, (len(refs), 1)))
        return keys, pos, values

    def cross_attention_lt(self, search: Tensor, refs) -> Tensor:
        keys, pos, values = self._reference_set(refs)
        return self.lt(search, self._pos, keys, pos, values)

    def cross_attention_st(self, search: Tensor, refs) -> Tensor:
        keys, pos, values = self._reference_set(refs)
        return self.st(search, self._pos, keys, pos, values)

    def fuse_branches(self, search: Tensor, lt_refs, st_refs) -> Tensor:
        lt = self.cross_attention_lt(search, lt_refs)
        st = self.cross_attention_st(search, st_refs)
        x = self.fuse(ag.concat([lt, st], axis=-1))
        return self.norm(ag.add(x, self.ffn2(ag.relu(self.ffn1(x)))))


# ---------------------------------------------------------------------------
# reference memory


@dataclass
class MemoryEntry:
    features: object
    mask: np.ndarray
    dice: float
    frame: int | None = None


@dataclass
class ReferenceMemory:
    """Bounded FIFO of high-quality past predictions.

    An entry is admitted iff its Dice score reaches ``threshold``; when full,
    the oldest entry is evicted.  Every decision is appended to ``trace``.
    """

    capacity: int = 3
    threshold: float = 0.7
    entries: deque = field(default_factory=deque)
    trace: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def latest(self) -> MemoryEntry | None:
        return self.entries[-1] if self.entries else None

    def update(self, features, mask, dice: float, frame: int | None = None) -> bool:
        if not 0.0 <= dice <= 1.0:
            raise ValueError(f"dice {dice} outside [0, 1]")
        if dice < self.threshold:
            self.trace.append({"frame": frame, "event": "reject", "dice": float(dice), "size": len(self.entries)})
            return False
        if len(self.entries) >= self.capacity:
            old = self.entries.popleft()
            self.trace.append({"frame": frame, "event": "evict", "dice": old.dice, "evicted_frame": old.frame,
                               "size": len(self.entries)})
        self.entries.append(MemoryEntry(features, mask, float(dice), frame))
        self.trace.append({"frame": frame, "event": "admit", "dice": float(dice), "size": len(self.entries)})
        return True


def update_memory(memory: ReferenceMemory, features, mask, dice: float, frame: int | None = None) -> ReferenceMemory:
    memory.update(features, mask, dice, frame)
    return memory
