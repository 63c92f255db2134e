"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. When gradients are enabled and an
operand requires them, each operation records its parent tensors and a
closure computing the parents' gradient contributions from the output
gradient. ``Tensor.backward()`` replays those records in reverse
topological order, so one traversal fills the gradient of every
participating leaf.

Only the primitives the fusion network and its losses need are defined
here; everything else (pooling, dense layers, attention) is composed from
them so the gradients come for free. Float32 and float64 are supported;
gradient-check tolerances are only meaningful at float64.
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "no_grad",
    "concat",
    "matmul",
    "conv2d",
    "dense",
    "global_avg_pool",
    "avg_pool2d",
    "upsample_nearest",
    "SelfAttentionParams",
    "self_attention",
    "kaiming_init",
]


class ShapeError(ValueError):
    """Operand shapes do not satisfy an operation's contract."""


_STATE = threading.local()


def _grad_enabled() -> bool:
    return getattr(_STATE, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable gradient recording inside the block (e.g. sampling loops)."""
    prev = _grad_enabled()
    _STATE.grad_enabled = False
    try:
        yield
    finally:
        _STATE.grad_enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """N-dimensional float array, optionally participating in autodiff.

    `grad` accumulates additively across `backward()` calls until
    `zero_grad()` resets it. Concurrent mutation of one tensor is not
    supported; independent graphs may run on independent threads.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward = None

    # -- basic introspection -------------------------------------------------

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

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._reject_item()

    def _reject_item(self):
        raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")

    def numpy(self) -> np.ndarray:
        """The underlying array (shared, not copied)."""
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        grad = "" if self.grad is None else ", with grad"
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{grad})"

    # -- gradient machinery --------------------------------------------------

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's `grad`.

        `self` must be a scalar (single element). Gradients add to any
        already present, so call `zero_grad()` on leaves between steps.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() requires a scalar loss, got shape {self.shape}")

        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))

        pending: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not (parent.requires_grad or parent._backward):
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg

    # -- operators -----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __pow__(self, p):
        return pow_scalar(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # -- method spellings of the common primitives ----------------------------

    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def swish(self):
        return mul(self, sigmoid(self))

    def clamp(self, lo: float, hi: float):
        return clamp(self, lo, hi)

    def softmax(self, axis: int = -1):
        return softmax(self, axis)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: tuple, backward) -> Tensor:
    track = _grad_enabled() and any(p.requires_grad or p._backward for p in parents)
    out = Tensor(data)
    if track:
        out._parents = parents
        out._backward = backward
    return out


# -- elementwise primitives ----------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    data = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(data, (a, b), backward)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    data = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return _make(data, (a, b), backward)


def div(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    data = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.data.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
        return ga, gb

    return _make(data, (a, b), backward)


def pow_scalar(a, p: float) -> Tensor:
    a = _as_tensor(a)
    p = float(p)
    data = a.data ** p

    def backward(g):
        return (g * p * a.data ** (p - 1.0),)

    return _make(data, (a,), backward)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    data = np.exp(a.data)
    return _make(data, (a,), lambda g: (g * data,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    data = np.sqrt(a.data)
    return _make(data, (a,), lambda g: (g / (2.0 * data),))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    # subgradient at 0 is 0 by contract
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward(g):
        return (g * data * (1.0 - data),)

    return _make(data, (a,), backward)


def clamp(a, lo: float, hi: float) -> Tensor:
    a = _as_tensor(a)
    mask = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,))


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        return ((g - dot) * data,)

    return _make(data, (a,), backward)


# -- reductions and movement ----------------------------------------------------


def _normalize_axes(axis, ndim: int):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    data = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _make(data, (a,), backward)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    data = a.data.mean(axis=axes, keepdims=keepdims)
    count = a.data.size if axes is None else math.prod(a.data.shape[i] for i in axes)

    def backward(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.data.shape).copy(),)

    return _make(data, (a,), backward)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.data.shape),))


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def getitem(a, idx) -> Tensor:
    a = _as_tensor(a)
    data = a.data[idx]

    def backward(g):
        out = np.zeros_like(a.data)
        out[idx] += g
        return (out,)

    return _make(data, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    base = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(base) or any(
            i != axis % t.ndim and s != b for i, (s, b) in enumerate(zip(t.shape, base))
        ):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis % t.ndim] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _make(data, tuple(tensors), backward)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape)
        return ga, gb

    return _make(data, (a, b), backward)


# -- spatial primitives ----------------------------------------------------------


def _conv_windows(x_pad: np.ndarray, kh: int, kw: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    n, c, _, _ = x_pad.shape
    sn, sc, sh, sw = x_pad.strides
    return np.lib.stride_tricks.as_strided(
        x_pad,
        shape=(n, c, kh, kw, out_h, out_w),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )


def conv2d(x, kernel, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of NCHW input with an OIHW kernel (no bias).

    Output spatial size is floor((H + 2*padding - k) / stride) + 1 per axis;
    both input and kernel gradients flow.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape}, {kernel.shape}")
    n, c_in, h, w = x.shape
    c_out, kc, kh, kw = kernel.shape
    if kc != c_in:
        raise ShapeError(f"conv2d: input has {c_in} channels but kernel expects {kc} (kernel {kernel.shape})")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(
            f"conv2d: padded input {h + 2 * padding}x{w + 2 * padding} is smaller than the {kh}x{kw} kernel"
        )
    out_h = (h + 2 * padding - kh) // stride + 1
    out_w = (w + 2 * padding - kw) // stride + 1

    if padding:
        x_pad = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        x_pad = x.data
    windows = _conv_windows(x_pad, kh, kw, stride, out_h, out_w)
    # (n, out_h, out_w, c_out) <- contract (c_in, kh, kw)
    data = np.tensordot(windows, kernel.data, axes=([1, 2, 3], [1, 2, 3]))
    data = np.ascontiguousarray(data.transpose(0, 3, 1, 2))

    def backward(g):
        gk = np.tensordot(g, windows, axes=([0, 2, 3], [0, 4, 5]))
        # (n, out_h, out_w, c_in, kh, kw)
        gwin = np.tensordot(g, kernel.data, axes=([1], [0]))
        gx_pad = np.zeros_like(x_pad)
        for i in range(kh):
            rows = slice(i, i + stride * (out_h - 1) + 1, stride)
            for j in range(kw):
                cols = slice(j, j + stride * (out_w - 1) + 1, stride)
                gx_pad[:, :, rows, cols] += gwin[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        if padding:
            gx = gx_pad[:, :, padding:-padding, padding:-padding]
        else:
            gx = gx_pad
        return np.ascontiguousarray(gx), gk

    return _make(data, (x, kernel), backward)


def dense(x, weight, bias) -> Tensor:
    """Affine map: `x @ weight.T + bias` for (N, F_in) inputs."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"dense expects 2-D input and weight, got {x.shape}, {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"dense: input features {x.shape[1]} != weight features {weight.shape[1]}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"dense: bias shape {bias.shape} != ({weight.shape[0]},)")
    return add(matmul(x, transpose(weight, (1, 0))), bias)


def global_avg_pool(x) -> Tensor:
    """Mean over the spatial plane: (N, C, H, W) -> (N, C)."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects (N, C, H, W), got {x.shape}")
    return reduce_mean(x, axis=(2, 3))


def avg_pool2d(x, factor: int = 2) -> Tensor:
    x = _as_tensor(x)
    n, c, h, w = x.shape
    if h % factor or w % factor:
        raise ShapeError(f"avg_pool2d: {h}x{w} not divisible by {factor}")
    r = reshape(x, (n, c, h // factor, factor, w // factor, factor))
    return reduce_mean(r, axis=(3, 5))


def upsample_nearest(x, factor: int = 2) -> Tensor:
    x = _as_tensor(x)
    n, c, h, w = x.shape
    data = x.data.repeat(factor, axis=2).repeat(factor, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _make(data, (x,), backward)


# -- attention --------------------------------------------------------------------


class SelfAttentionParams:
    """Projection weights for single- or multi-head spatial self-attention.

    The output projection starts at zero so a fresh block is the identity.
    """

    def __init__(self, channels: int, rng: np.random.Generator, heads: int = 1, dtype=np.float64):
        if channels % heads:
            raise ShapeError(f"attention: {channels} channels not divisible by {heads} heads")
        self.channels = channels
        self.heads = heads
        self.wq = kaiming_init((channels, channels), channels, rng, dtype)
        self.wk = kaiming_init((channels, channels), channels, rng, dtype)
        self.wv = kaiming_init((channels, channels), channels, rng, dtype)
        self.wo = Tensor(np.zeros((channels, channels), dtype=dtype), requires_grad=True)

    def parameters(self):
        return [("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo)]


def self_attention(x, params: SelfAttentionParams) -> Tensor:
    """Scaled dot-product attention over the H*W token axis, plus residual."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"self_attention expects (N, C, H, W), got {x.shape}")
    n, c, h, w = x.shape
    if c != params.channels:
        raise ShapeError(f"self_attention: input has {c} channels, params expect {params.channels}")
    heads = params.heads
    dk = c // heads
    tokens = h * w

    seq = transpose(reshape(x, (n, c, tokens)), (0, 2, 1))  # (n, T, c)
    q = matmul(seq, transpose(params.wq, (1, 0)))
    k = matmul(seq, transpose(params.wk, (1, 0)))
    v = matmul(seq, transpose(params.wv, (1, 0)))

    def split_heads(t):
        return transpose(reshape(t, (n, tokens, heads, dk)), (0, 2, 1, 3))  # (n, H, T, dk)

    q, k, v = split_heads(q), split_heads(k), split_heads(v)
    scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dk))
    attn = softmax(scores, axis=-1)
    ctx = matmul(attn, v)  # (n, H, T, dk)
    ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (n, tokens, c))
    out = matmul(ctx, transpose(params.wo, (1, 0)))
    out = reshape(transpose(out, (0, 2, 1)), (n, c, h, w))
    return add(x, out)


# -- initialization ----------------------------------------------------------------


def kaiming_init(shape, fan_in: int, rng: np.random.Generator, dtype=np.float64) -> Tensor:
    """I.i.d. normal draws with mean 0 and variance 2/fan_in."""
    if fan_in < 1:
        raise ValueError(f"kaiming_init: fan_in must be >= 1, got {fan_in}")
    std = math.sqrt(2.0 / fan_in)
    data = rng.normal(0.0, std, size=tuple(shape)).astype(dtype)
    return Tensor(data, requires_grad=True)
