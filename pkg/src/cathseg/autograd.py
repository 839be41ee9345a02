"""Dense tensors with reverse-mode automatic differentiation.

Every operation builds a node that remembers its parents and a closure
mapping the output gradient to one gradient per parent.  ``backward`` orders
the recorded nodes into a :class:`Tape` (reverse topological order) and
replays it.

Only the operations the segmentation model needs are provided.  Data is kept
in row-major numpy arrays; the default precision is float32 and can be
switched to float64 with :func:`precision` for tight gradient checks.
"""

from __future__ import annotations

import contextlib
import os
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

__all__ = [
    "Tensor", "Tape", "DimensionError", "ContractError", "NumericalError",
    "precision", "get_default_dtype", "set_debug", "debug", "no_grad",
    "is_grad_enabled", "tensor", "backward",
    "add", "sub", "mul", "div", "neg", "matmul", "softmax", "relu",
    "sigmoid", "exp", "log", "clip", "layer_norm", "reshape", "permute",
    "swapaxes", "concat", "stack", "sum", "mean", "getitem", "conv2d",
    "conv3d", "conv_transpose3d",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """An operation was called outside its documented preconditions."""


class NumericalError(FloatingPointError):
    """An operation produced NaN or Inf while finite checks were enabled."""


_DTYPES = {"float32": np.float32, "float64": np.float64}
_state = {
    "dtype": np.float32,
    "check_finite": os.environ.get("CATHSEG_DEBUG", "") not in ("", "0"),
    "grad": True,
}


def get_default_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for newly created tensors."""
    dt = _DTYPES[dtype] if isinstance(dtype, str) else np.dtype(dtype).type
    if dt not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype!r}")
    old = _state["dtype"]
    _state["dtype"] = dt
    try:
        yield
    finally:
        _state["dtype"] = old


def set_debug(flag: bool) -> None:
    """Enable or disable the NaN/Inf check after every operation."""
    _state["check_finite"] = bool(flag)


@contextlib.contextmanager
def debug(flag: bool = True):
    old = _state["check_finite"]
    _state["check_finite"] = flag
    try:
        yield
    finally:
        _state["check_finite"] = old


@contextlib.contextmanager
def no_grad():
    """Evaluate operations without recording them for differentiation."""
    old = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = old


def is_grad_enabled() -> bool:
    return _state["grad"]


class Tensor:
    """An n-dimensional array with an optional gradient.

    ``data`` is a numpy array, ``grad`` is ``None`` until a backward pass
    reaches the tensor, after which it is an array of the same shape.
    """

    __array_priority__ = 100
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.array(data, dtype=dtype or _state["dtype"], copy=True)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __truediv__ = lambda self, other: div(self, other)
    __rtruediv__ = lambda self, other: div(other, self)
    __matmul__ = lambda self, other: matmul(self, other)
    __neg__ = lambda self: neg(self)
    __getitem__ = lambda self, idx: getitem(self, idx)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return mean(self, axis, keepdims)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _operands(a, b) -> tuple:
    like = a if isinstance(a, Tensor) else b if isinstance(b, Tensor) else None
    return _as_tensor(a, like), _as_tensor(b, like)


def _make(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable, op: str) -> Tensor:
    if _state["check_finite"] and not np.all(np.isfinite(data)):
        raise NumericalError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.requires_grad = _state["grad"] and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = grad_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# tape and backward pass


class Tape:
    """Recorded operations reachable from an output, in execution order.

    Replaying in reverse visits every node after all of its consumers, so the
    gradient arriving at a node is complete when its closure runs.
    """

    def __init__(self, output: Tensor):
        self.output = output
        self.nodes: list[Tensor] = []
        seen = set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in reversed(node._parents):
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

    def __len__(self) -> int:
        return len(self.nodes)

    def replay(self, seed: np.ndarray) -> None:
        pending = {id(self.output): seed}
        for node in reversed(self.nodes):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.dtype != parent.data.dtype:
                    pg = pg.astype(parent.data.dtype)
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg


def backward(loss: Tensor) -> Tape:
    """Populate ``grad`` on every tensor that ``loss`` depends on.

    Gradients accumulate across calls; reset them with ``zero_grad``.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss was not recorded: no input requires grad or grad is disabled")
    tape = Tape(loss)
    tape.replay(np.ones_like(loss.data))
    return tape


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _operands(a, b)
    sa, sb = a.shape, b.shape
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"add: shapes {sa} and {sb} do not broadcast") from exc
    return _make(data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _operands(a, b)
    sa, sb = a.shape, b.shape
    try:
        data = a.data - b.data
    except ValueError as exc:
        raise DimensionError(f"sub: shapes {sa} and {sb} do not broadcast") from exc
    return _make(data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _operands(a, b)
    sa, sb = a.shape, b.shape
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"mul: shapes {sa} and {sb} do not broadcast") from exc

    def grad_fn(g):
        return _unbroadcast(g * b.data, sa), _unbroadcast(g * a.data, sb)

    return _make(data, (a, b), grad_fn, "mul")


def div(a, b) -> Tensor:
    a, b = _operands(a, b)
    sa, sb = a.shape, b.shape
    try:
        data = a.data / b.data
    except ValueError as exc:
        raise DimensionError(f"div: shapes {sa} and {sb} do not broadcast") from exc

    def grad_fn(g):
        return _unbroadcast(g / b.data, sa), _unbroadcast(-g * data / b.data, sb)

    return _make(data, (a, b), grad_fn, "div")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data)
    return _make(y, (x,), lambda g: (g * y * (1 - y),), "sigmoid")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; the gradient is zero where the clamp is active."""
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clip")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax: axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), grad_fn, "softmax")


def layer_norm(x: Tensor, axis: int = -1, weight: Tensor | None = None,
               bias: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalise to zero mean and unit variance along ``axis``.

    ``weight`` and ``bias`` must broadcast against ``x`` (for example
    ``(C, 1, 1)`` when normalising the channel axis of a ``(C, H, W)`` map).
    """
    mu = x.data.mean(axis=axis, keepdims=True)
    centred = x.data - mu
    var = (centred * centred).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centred * inv

    def grad_fn(g):
        gm = g.mean(axis=axis, keepdims=True)
        gxm = (g * xhat).mean(axis=axis, keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    out = _make(xhat.astype(x.dtype), (x,), grad_fn, "layer_norm")
    if weight is not None:
        out = mul(out, weight)
    if bias is not None:
        out = add(out, bias)
    return out


# ---------------------------------------------------------------------------
# shape manipulation and reductions


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    try:
        data = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {src} as {tuple(shape)}") from exc
    return _make(data, (x,), lambda g: (g.reshape(src),), "reshape")


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(int(a) % x.ndim for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"permute: {axes} is not a permutation of {x.ndim} axes")
    inverse = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),), "permute")


def swapaxes(x: Tensor, a: int = -1, b: int = -2) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return permute(x, axes)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat: empty sequence")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"concat: incompatible shapes {shapes} on axis {axis}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(data, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("stack: empty sequence")
    try:
        data = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"stack: shapes differ {shapes}") from exc
    n = len(tensors)

    def grad_fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _make(data, tensors, grad_fn, "stack")


def getitem(x: Tensor, index) -> Tensor:
    """Basic (non-fancy) indexing and slicing."""
    src, dtype = x.shape, x.dtype
    data = x.data[index]

    def grad_fn(g):
        full = np.zeros(src, dtype=dtype)
        full[index] = g
        return (full,)

    return _make(np.array(data, copy=True), (x,), grad_fn, "getitem")


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    src = x.shape
    data = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(data, (x,), grad_fn, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = x.shape
    data = np.asarray(x.data.mean(axis=axis, keepdims=keepdims))
    count = x.size // max(data.size, 1)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, src).copy(),)

    return _make(data, (x,), grad_fn, "mean")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = _operands(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul: batch axes of {a.shape} and {b.shape} do not broadcast") from exc
    sa, sb = a.shape, b.shape

    def grad_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, sa),
                None if gb is None else _unbroadcast(gb, sb))

    return _make(data, (a, b), grad_fn, "matmul")


# ---------------------------------------------------------------------------
# convolutions


def _pair(v) -> tuple:
    return (v, v) if np.isscalar(v) else tuple(v)


def _triple(v) -> tuple:
    return (v, v, v) if np.isscalar(v) else tuple(v)


def conv2d(x: Tensor, kernels: Tensor, stride=1, padding=0) -> Tensor:
    """Cross-correlation of ``x`` (C_in,H,W) or (B,C_in,H,W) with (C_out,C_in,kh,kw)."""
    batched = x.ndim == 4
    if x.ndim not in (3, 4) or kernels.ndim != 4:
        raise DimensionError(f"conv2d: expected (B,)C,H,W input and 4-d kernels, got {x.shape}, {kernels.shape}")
    xd = x.data if batched else x.data[None]
    _, c_in, h, w = xd.shape
    c_out, kc, kh, kw = kernels.shape
    if kc != c_in:
        raise DimensionError(f"conv2d: input has {c_in} channels, kernels {kernels.shape} expect {kc}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if kh > h + 2 * ph or kw > w + 2 * pw:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * ph}x{w + 2 * pw}")
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else xd
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :ho, :wo]
    out = np.tensordot(win, kernels.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    wk = kernels.data

    def grad_fn(g):
        g = g if batched else g[None]
        gk = None
        if kernels.requires_grad:
            gk = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        gx = None
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=xp.dtype)
            for i in range(kh):
                for j in range(kw):
                    contrib = np.tensordot(g, wk[:, :, i, j], axes=(1, 0)).transpose(0, 3, 1, 2)
                    gxp[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw] += contrib
            gx = gxp[:, :, ph:ph + h, pw:pw + w]
            gx = gx if batched else gx[0]
        return gx, gk

    return _make(out if batched else out[0], (x, kernels), grad_fn, "conv2d")


def _conv3d_np(x, w, stride):
    """Valid 3-d cross-correlation: x (A,T,H,W), w (B,A,kt,kh,kw) -> (B,T',H',W')."""
    st, sh, sw = stride
    _, t, h, ww = x.shape
    b, _, kt, kh, kw = w.shape
    to, ho, wo = (t - kt) // st + 1, (h - kh) // sh + 1, (ww - kw) // sw + 1
    out = np.zeros((b, to, ho, wo), dtype=np.result_type(x, w))
    for a in range(kt):
        for i in range(kh):
            for j in range(kw):
                patch = x[:, a:a + st * (to - 1) + 1:st, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw]
                out += np.tensordot(w[:, :, a, i, j], patch, axes=(1, 0))
    return out


def _conv_transpose3d_np(x, w, stride, out_shape=None):
    """Adjoint of :func:`_conv3d_np`: x (A,T,H,W), w (A,B,kt,kh,kw) -> (B,T',H',W')."""
    st, sh, sw = stride
    _, t, h, ww = x.shape
    _, b, kt, kh, kw = w.shape
    if out_shape is None:
        out_shape = ((t - 1) * st + kt, (h - 1) * sh + kh, (ww - 1) * sw + kw)
    out = np.zeros((b,) + tuple(out_shape), dtype=np.result_type(x, w))
    for a in range(kt):
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(w[:, :, a, i, j], x, axes=(0, 0))
                out[:, a:a + st * (t - 1) + 1:st, i:i + sh * (h - 1) + 1:sh, j:j + sw * (ww - 1) + 1:sw] += contrib
    return out


def conv3d(x: Tensor, kernels: Tensor, stride=1) -> Tensor:
    """Valid cross-correlation of x (C_in,T,H,W) with kernels (C_out,C_in,kt,kh,kw)."""
    if x.ndim != 4 or kernels.ndim != 5:
        raise DimensionError(f"conv3d: expected (C,T,H,W) input and 5-d kernels, got {x.shape}, {kernels.shape}")
    if kernels.shape[1] != x.shape[0]:
        raise DimensionError(f"conv3d: input {x.shape} has {x.shape[0]} channels, kernels {kernels.shape} expect {kernels.shape[1]}")
    if any(k > n for k, n in zip(kernels.shape[2:], x.shape[1:])):
        raise DimensionError(f"conv3d: kernel {kernels.shape[2:]} larger than input {x.shape[1:]}")
    s = _triple(stride)
    out = _conv3d_np(x.data, kernels.data, s)

    def grad_fn(g):
        gx = gk = None
        if x.requires_grad:
            gx = np.zeros(x.shape, dtype=x.dtype)
            part = _conv_transpose3d_np(g, kernels.data, s)
            gx[:, :part.shape[1], :part.shape[2], :part.shape[3]] = part
        if kernels.requires_grad:
            gk = np.zeros(kernels.shape, dtype=kernels.dtype)
            kt, kh, kw = kernels.shape[2:]
            to, ho, wo = g.shape[1:]
            st, sh, sw = s
            for a in range(kt):
                for i in range(kh):
                    for j in range(kw):
                        patch = x.data[:, a:a + st * (to - 1) + 1:st, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw]
                        gk[:, :, a, i, j] = np.tensordot(g, patch, axes=([1, 2, 3], [1, 2, 3]))
        return gx, gk

    return _make(out, (x, kernels), grad_fn, "conv3d")


def conv_transpose3d(x: Tensor, kernels: Tensor, stride=1) -> Tensor:
    """Transposed 3-d convolution of x (C_in,T,H,W) with kernels (C_in,C_out,kt,kh,kw).

    Output extents are ``(n - 1) * stride + k`` per axis; this is the linear
    adjoint of :func:`conv3d` with the same kernel array and stride.
    """
    if x.ndim != 4 or kernels.ndim != 5:
        raise DimensionError(f"conv_transpose3d: expected (C,T,H,W) input and 5-d kernels, got {x.shape}, {kernels.shape}")
    if kernels.shape[0] != x.shape[0]:
        raise DimensionError(f"conv_transpose3d: input {x.shape} has {x.shape[0]} channels, kernels {kernels.shape} expect {kernels.shape[0]}")
    s = _triple(stride)
    out = _conv_transpose3d_np(x.data, kernels.data, s)

    def grad_fn(g):
        gx = _conv3d_np(g, kernels.data, s) if x.requires_grad else None
        gk = None
        if kernels.requires_grad:
            gk = np.zeros(kernels.shape, dtype=kernels.dtype)
            kt, kh, kw = kernels.shape[2:]
            t, h, w = x.shape[1:]
            st, sh, sw = s
            for a in range(kt):
                for i in range(kh):
                    for j in range(kw):
                        patch = g[:, a:a + st * (t - 1) + 1:st, i:i + sh * (h - 1) + 1:sh, j:j + sw * (w - 1) + 1:sw]
                        gk[:, :, a, i, j] = np.tensordot(x.data, patch, axes=([1, 2, 3], [1, 2, 3]))
        return gx, gk

    return _make(out, (x, kernels), grad_fn, "conv_transpose3d")

