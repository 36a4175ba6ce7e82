"""Reverse-mode automatic differentiation over numpy arrays.

Only the operations the encoder, heads and losses need are provided. Each
op records its parents and a closure mapping the output gradient to the
parent gradients; :meth:`Tensor.backward` walks the recorded graph in
reverse topological order and accumulates into the ``grad`` slot of leaf
tensors that require gradients.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import ConfigError, StateError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    # ------------------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    # ------------------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        The recorded graph is released afterwards, so a second call on the
        same output raises :class:`StateError`.
        """
        if self._backward is None:
            raise StateError(
                "backward() called on a tensor with no recorded forward pass"
            )
        if grad is None:
            if self.data.size != 1:
                raise StateError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        for node in order:
            node._parents = ()
            node._backward = None

    # ------------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(self._lift(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(self._lift(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def _lift(self, value) -> "Tensor":
        if isinstance(value, Tensor):
            return value
        return Tensor(np.asarray(value, dtype=self.data.dtype))


def _as_tensor(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype))


def _record(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _binary_operands(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _as_tensor(b, a)
    b = _as_tensor(b)
    return _as_tensor(a, b), b


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _record(a.data / b.data, (a, b), backward)


def power(a: Tensor, exponent: float) -> Tensor:
    e = np.asarray(exponent, dtype=a.data.dtype)

    def backward(g):
        return (g * e * a.data ** (e - 1),)

    return _record(a.data**e, (a,), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        return (g * mask,)

    return _record(a.data * mask, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        return (g * out * (1 - out),)

    return _record(out, (a,), backward)


def log(a: Tensor) -> Tensor:
    def backward(g):
        return (g / a.data,)

    return _record(np.log(a.data), (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def backward(g):
        return (g * 0.5 / out,)

    return _record(out, (a,), backward)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; the gradient is zero wherever the clamp is active."""
    mask = (a.data >= lo) & (a.data <= hi)

    def backward(g):
        return (g * mask,)

    return _record(np.clip(a.data, lo, hi), (a,), backward)


# ---------------------------------------------------------------------------
# reductions and shape ops


def _normalize_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.data.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(np.asarray(out), (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.data.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return tsum(a, axis=axes, keepdims=keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    def backward(g):
        return (g.reshape(a.shape),)

    return _record(a.data.reshape(shape), (a,), backward)


def getitem(a: Tensor, index) -> Tensor:
    fancy = any(
        isinstance(ix, (list, np.ndarray)) for ix in (index if isinstance(index, tuple) else (index,))
    )

    def backward(g):
        full = np.zeros_like(a.data)
        if fancy:
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _record(np.asarray(a.data[index]), (a,), backward)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        pieces = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            pieces.append(g[tuple(sl)])
        return tuple(pieces)

    return _record(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _binary_operands(a, b)

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _record(a.data @ b.data, (a, b), backward)


# ---------------------------------------------------------------------------
# layers


def linear(x: Tensor, weight: Tensor, bias: Tensor | None) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape (N, in)."""
    if x.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ConfigError(
            f"linear: input shape {x.shape} incompatible with weight {weight.shape}"
        )
    out = matmul(x, transpose2d(weight))
    return out + bias if bias is not None else out


def transpose2d(a: Tensor) -> Tensor:
    def backward(g):
        return (g.T,)

    return _record(a.data.T, (a,), backward)


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(C, N, H, W) -> (k*k*C, N*H*W) columns for a stride-1 'same' kernel,
    rows ordered (ky, kx, c)."""
    c, n, h, w = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = np.empty((k * k, c, n, h, w), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[i * k + j] = xp[:, :, i : i + h, j : j + w]
    return cols.reshape(k * k * c, n * h * w)


def _col2im(cols: np.ndarray, k: int, shape: tuple[int, ...]) -> np.ndarray:
    """Adjoint of :func:`_im2col`."""
    c, n, h, w = shape
    p = k // 2
    cols = cols.reshape(k * k, c, n, h, w)
    dxp = np.zeros((c, n, h + 2 * p, w + 2 * p), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + h, j : j + w] += cols[i * k + j]
    return dxp[:, :, p : p + h, p : p + w]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None) -> Tensor:
    """Stride-1 'same' convolution.

    Activations are laid out (C, N, H, W) so that column copies move whole
    image rows; the kernel is (O, C, k, k) with k odd.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4 or x.shape[0] != weight.shape[1]:
        raise ConfigError(
            f"conv2d: input shape {x.shape} incompatible with weight {weight.shape}"
        )
    c, n, h, w = x.shape
    o, _, kh, kw = weight.shape
    if kh != kw or kh % 2 == 0:
        raise ConfigError(f"conv2d: kernel must be square and odd, got {kh}x{kw}")
    cols = _im2col(x.data, kh)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(o, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(o, n, h, w)

    def backward(g):
        go = g.reshape(o, n * h * w)
        dw = (go @ cols.T).reshape(o, kh, kw, c).transpose(0, 3, 1, 2)
        grads = [None, dw]
        if x.requires_grad:
            grads[0] = _col2im(wmat.T @ go, kh, x.shape)
        if bias is not None:
            grads.append(go.sum(axis=1))
        return tuple(grads)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _record(out, parents, backward)


def mean_pool2d(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 average pooling over the last two axes."""
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ConfigError(f"mean_pool2d: spatial dims {h}x{w} not divisible by 2")
    d = x.data
    quarter = d.dtype.type(0.25)
    out = (d[..., 0::2, 0::2] + d[..., 1::2, 0::2] + d[..., 0::2, 1::2] + d[..., 1::2, 1::2]) * quarter

    def backward(g):
        q = g * quarter
        full = np.empty_like(d)
        full[..., 0::2, 0::2] = q
        full[..., 1::2, 0::2] = q
        full[..., 0::2, 1::2] = q
        full[..., 1::2, 1::2] = q
        return (full,)

    return _record(out, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """(C, N, H, W) -> (N, C)."""
    return transpose2d(tmean(x, axis=(2, 3)))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of integer ``labels`` under ``logits`` (N, K)."""
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    labels = np.asarray(labels, dtype=np.int64)
    n = z.shape[0]
    loss = -logp[np.arange(n), labels].mean()

    def backward(g):
        probs = np.exp(logp)
        probs[np.arange(n), labels] -= 1.0
        return (g * probs / n,)

    return _record(np.asarray(loss, dtype=z.dtype), (logits,), backward)


def softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)
