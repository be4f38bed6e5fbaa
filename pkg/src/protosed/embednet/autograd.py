"""Minimal tape-based reverse-mode differentiation for the embedding CNN.

Only the operations the network and the episode loss need are provided.
Image tensors use NHWC layout.
"""
from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..exceptions import ShapeError, StateError

_STATE = threading.local()  # grad mode is per thread


@contextlib.contextmanager
def no_grad():
    prev, _STATE.enabled = grad_enabled(), False
    try:
        yield
    finally:
        _STATE.enabled = prev


def grad_enabled() -> bool:
    return getattr(_STATE, "enabled", True)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None):
        """Backpropagate from this tensor through the recorded graph."""
        if not self.requires_grad:
            raise StateError("backward() called on a tensor with no recorded graph; "
                             "run forward in train mode with taping enabled first")
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without an explicit gradient needs a scalar")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if node._parents:
                    # free intermediate storage; leaves keep their gradients
                    node._backward = None
                    node._parents = ()
                    node.grad = None if node is not self else node.grad

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward)


def power(a: Tensor, p: float) -> Tensor:
    def backward(g):
        a._accumulate(g * p * a.data ** (p - 1))

    return _make(a.data ** p, (a,), backward)


def sqrt(a: Tensor, eps: float = 0.0) -> Tensor:
    out = np.sqrt(a.data + eps)

    def backward(g):
        a._accumulate(g * 0.5 / out)

    return _make(out, (a,), backward)


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    if 0 <= slope <= 1:
        out = np.maximum(a.data, a.data * a.data.dtype.type(slope))
    else:
        out = np.where(a.data > 0, a.data, a.data * slope)

    def backward(g):
        scale = np.where(a.data > 0, a.data.dtype.type(1), a.data.dtype.type(slope))
        a._accumulate(g * scale)

    return _make(out, (a,), backward)


# ---------------------------------------------------------------------------
# reductions and shape ops


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g / n, a.shape))

    return _make(np.asarray(a.data.mean(axis=axis, keepdims=keepdims)), (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    def backward(g):
        a._accumulate(g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)

    def backward(g):
        a._accumulate(g.transpose(inv))

    return _make(a.data.transpose(axes), (a,), backward)


def getitem(a: Tensor, idx) -> Tensor:
    basic = all(isinstance(i, (slice, int, type(None), type(Ellipsis)))
                for i in (idx if isinstance(idx, tuple) else (idx,)))

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        a._accumulate(full)

    return _make(a.data[idx], (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _make(a.data @ b.data, (a, b), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def backward(g):
        a._accumulate(g - soft * g.sum(axis=axis, keepdims=True))

    return _make(out, (a,), backward)


def pairwise_distance(q: Tensor, s: Tensor, eps: float = 1e-12) -> Tensor:
    """Euclidean distances between rows of ``q`` (n, d) and rows of ``s`` (m, d)."""
    if q.shape[-1] != s.shape[-1]:
        raise ShapeError(f"embedding dims differ: {q.shape[-1]} vs {s.shape[-1]}")
    diff = q.data[:, None, :] - s.data[None, :, :]
    dist = np.sqrt((diff ** 2).sum(-1) + eps)

    def backward(g):
        coef = (g / dist)[:, :, None] * diff
        if q.requires_grad:
            q._accumulate(coef.sum(axis=1))
        if s.requires_grad:
            s._accumulate(-coef.sum(axis=0))

    return _make(dist, (q, s), backward)


# ---------------------------------------------------------------------------
# convolutional ops (NHWC)


def _im2col(xp: np.ndarray, kh: int, kw: int) -> np.ndarray:
    B, Hp, Wp, C = xp.shape
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # B,H,W,C,kh,kw
    H, W = Hp - kh + 1, Wp - kw + 1
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(B * H * W, kh * kw * C)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, padding: int = 1) -> Tensor:
    """Stride-1 'same' convolution; ``w`` has shape (kh, kw, c_in, c_out) with odd kh, kw."""
    kh, kw, cin, cout = w.shape
    if x.shape[-1] != cin:
        raise ShapeError(f"conv expects {cin} input channels, got {x.shape[-1]}")
    if padding != (kh - 1) // 2 or padding != (kw - 1) // 2:
        raise ShapeError("conv2d only supports same-padding with odd kernels")
    B, H, W, _ = x.shape
    pad = ((0, 0), (padding, padding), (padding, padding), (0, 0))
    if kh == 1 and kw == 1:
        cols = x.data.reshape(-1, cin)
    else:
        cols = _im2col(np.pad(x.data, pad), kh, kw)
    w2 = w.data.reshape(kh * kw * cin, cout)
    out = cols @ w2
    if b is not None:
        out += b.data
    out = out.reshape(B, H, W, cout)
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.reshape(-1, cout)
        if w.requires_grad:
            w._accumulate((cols.T @ g2).reshape(w.shape))
        if b is not None and b.requires_grad:
            b._accumulate(np.ones(g2.shape[0], dtype=g2.dtype) @ g2)
        if x.requires_grad:
            if kh == 1 and kw == 1:
                x._accumulate((g2 @ w2.T).reshape(x.shape))
                return
            # input gradient is a convolution of g with the flipped, transposed kernel
            wf = w.data[::-1, ::-1].transpose(0, 1, 3, 2).reshape(kh * kw * cout, cin)
            gcols = _im2col(np.pad(g, pad), kh, kw)
            x._accumulate((gcols @ wf).reshape(x.shape))

    return _make(out, parents, backward)


def _chan_sum(a: np.ndarray) -> np.ndarray:
    a2 = a.reshape(-1, a.shape[-1])
    return np.ones(a2.shape[0], dtype=a.dtype) @ a2


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over all but the last axis.

    In training mode the running statistics arrays are updated in place.
    """
    n = x.data.size // x.shape[-1]
    if training:
        mean = _chan_sum(x.data) / n
        xc = x.data - mean
        var = _chan_sum(xc * xc) / n
        unbiased = var * n / max(n - 1, 1)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mean, var = running_mean.astype(x.dtype), running_var.astype(x.dtype)
        xc = x.data - mean
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = xc * inv_std
    out = xhat * gamma.data + beta.data

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate(_chan_sum(g * xhat))
        if beta.requires_grad:
            beta._accumulate(_chan_sum(g))
        if x.requires_grad:
            gx = g * gamma.data
            if training:
                gx = inv_std * (gx - _chan_sum(gx) / n - xhat * (_chan_sum(gx * xhat) / n))
            else:
                gx = gx * inv_std
            x._accumulate(gx)

    return _make(out, (x, gamma, beta), backward)


def _pad_even(a: np.ndarray, value: float) -> np.ndarray:
    ph, pw = a.shape[1] % 2, a.shape[2] % 2
    if ph or pw:
        a = np.pad(a, ((0, 0), (0, ph), (0, pw), (0, 0)), constant_values=value)
    return a


def max_pool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling, ceil mode: output spatial dims are ceil(input / 2)."""
    B, H, W, C = x.shape
    xp = _pad_even(x.data, -np.inf)
    H2, W2 = xp.shape[1] // 2, xp.shape[2] // 2
    blocks = xp.reshape(B, H2, 2, W2, 2, C).transpose(0, 1, 3, 5, 2, 4).reshape(B, H2, W2, C, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros((B, H2, W2, C, 4), dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gx = gb.reshape(B, H2, W2, C, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(B, 2 * H2, 2 * W2, C)
        x._accumulate(gx[:, :H, :W, :])

    return _make(out, (x,), backward)


def avg_pool2x2(x: Tensor) -> Tensor:
    """2x2 average pooling, ceil mode, averaging only over in-bounds elements."""
    B, H, W, C = x.shape
    xp = _pad_even(x.data, 0.0)
    H2, W2 = xp.shape[1] // 2, xp.shape[2] // 2
    ones = _pad_even(np.ones((1, H, W, 1), dtype=x.data.dtype), 0.0)
    counts = ones.reshape(1, H2, 2, W2, 2, 1).sum(axis=(2, 4))
    out = xp.reshape(B, H2, 2, W2, 2, C).sum(axis=(2, 4)) / counts

    def backward(g):
        gs = g / counts
        gx = np.repeat(np.repeat(gs, 2, axis=1), 2, axis=2)
        x._accumulate(gx[:, :H, :W, :])

    return _make(out, (x,), backward)


def adaptive_pool_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Row i averages input cells floor(i*n/m) .. ceil((i+1)*n/m) - 1."""
    A = np.zeros((n_out, n_in), dtype=dtype)
    for i in range(n_out):
        lo = (i * n_in) // n_out
        hi = math.ceil((i + 1) * n_in / n_out)
        A[i, lo:hi] = 1.0 / (hi - lo)
    return A


def adaptive_avg_pool(x: Tensor, out_h: int, out_w: int) -> Tensor:
    B, H, W, C = x.shape
    Ah = adaptive_pool_matrix(H, out_h, x.data.dtype)
    Aw = adaptive_pool_matrix(W, out_w, x.data.dtype)
    out = np.einsum("th,bhwc,fw->btfc", Ah, x.data, Aw, optimize=True)

    def backward(g):
        x._accumulate(np.einsum("th,btfc,fw->bhwc", Ah, g, Aw, optimize=True))

    return _make(out, (x,), backward)
