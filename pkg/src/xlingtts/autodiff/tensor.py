"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation records its parents and a closure that pushes the output
gradient back to them.  ``backward`` walks the graph in reverse topological
order.  Graph recording is skipped inside :func:`no_grad` and whenever no
input requires a gradient, so inference runs at plain numpy speed.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

DTYPE = np.float64

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


class UsageError(RuntimeError):
    """Raised when an operation is called outside its usage contract."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    # -- autodiff driver --------------------------------------------------
    def backward(self) -> None:
        """Populate ``.grad`` on every tracked node reachable from this scalar."""
        if self.data.size != 1:
            raise UsageError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = _topological_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        # free intermediate buffers; leaves keep their gradients
        for node in order:
            if node._parents:
                node.grad = None
                node._parents = ()
                node._backward = None

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

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

    def transpose(self, *axes):
        return transpose(self, axes or None)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise arithmetic ----------------------------------------------
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


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(a.data / b.data, (a, b), backward)


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        a._accumulate(g * exponent * a.data ** (exponent - 1))

    return _make(a.data**exponent, (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        a._accumulate(g * out_data)

    return _make(out_data, (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        a._accumulate(g / a.data)

    return _make(np.log(a.data), (a,), backward)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)

    def backward(g):
        a._accumulate(g * s * (1.0 - s))

    return _make(s, (a,), backward)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)

    def backward(g):
        a._accumulate(g * (1.0 - t * t))

    return _make(t, (a,), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    keep = a.data > 0

    def backward(g):
        a._accumulate(g * keep)

    return _make(a.data * keep, (a,), backward)


def absolute(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        a._accumulate(g * np.sign(a.data))

    return _make(np.abs(a.data), (a,), backward)


def clip(a, low: float, high: float) -> Tensor:
    """Clamp values; the gradient is passed only where no clamping happened."""
    a = as_tensor(a)
    inside = (a.data >= low) & (a.data <= high)

    def backward(g):
        a._accumulate(g * inside)

    return _make(np.clip(a.data, low, high), (a,), backward)


# -- reductions and shape ops ----------------------------------------------
def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        a._accumulate(g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), backward)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inverse = None if axes is None else np.argsort(axes)

    def backward(g):
        a._accumulate(np.transpose(g, inverse))

    return _make(np.transpose(a.data, axes), (a,), backward)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in items)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        a._accumulate(full)

    return _make(a.data[index], (a,), backward)


def embedding(table, ids) -> Tensor:
    """Row lookup ``table[ids]``; repeated ids accumulate gradient."""
    ids = np.asarray(ids, dtype=np.int64)
    return getitem(table, ids)


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
            b._accumulate(gb)

    return _make(a.data @ b.data, (a, b), backward)


# -- softmax family ------------------------------------------------------
def _softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    s = _softmax(a.data, axis)

    def backward(g):
        a._accumulate(s * (g - (g * s).sum(axis=axis, keepdims=True)))

    return _make(s, (a,), backward)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        a._accumulate(g - np.exp(out) * g.sum(axis=axis, keepdims=True))

    return _make(out, (a,), backward)


# -- neural primitives ---------------------------------------------------
def glu(x) -> Tensor:
    """Gated linear unit: first half of the last axis times sigmoid of the second."""
    x = as_tensor(x)
    width = x.shape[-1]
    if width % 2:
        raise ShapeError(f"glu needs an even last dimension, got {width}")
    half = width // 2
    value, gate = x.data[..., :half], expit(x.data[..., half:])

    def backward(g):
        x._accumulate(np.concatenate([g * gate, g * value * gate * (1.0 - gate)], axis=-1))

    return _make(value * gate, (x,), backward)


def normalize(x, eps: float = 1e-5) -> Tensor:
    """Zero-mean, unit-variance normalisation over the last axis (no affine)."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        x._accumulate(inv_std * (g - gm - xhat * gx))

    return _make(xhat, (x,), backward)


def layer_norm(x, scale, bias, eps: float = 1e-5) -> Tensor:
    x = as_tensor(x)
    if x.shape[-1] < 2:
        raise ShapeError("layer_norm needs at least two features")
    return normalize(x, eps) * scale + bias


def lightweight_conv(x, kernel_logits) -> Tensor:
    """Depthwise convolution with softmax-normalised kernels shared per head.

    ``x`` is ``[..., T, D]``; ``kernel_logits`` is ``[H, K]`` with odd ``K``.
    Channel ``c`` belongs to head ``c // (D // H)``.  Inputs are zero padded by
    ``(K - 1) / 2`` on both ends so the output keeps length ``T``.
    """
    x, kernel_logits = as_tensor(x), as_tensor(kernel_logits)
    heads, taps = kernel_logits.shape
    width = x.shape[-1]
    if width % heads:
        raise ShapeError(f"model dim {width} is not divisible by {heads} heads")
    if taps % 2 == 0:
        raise ShapeError(f"kernel size must be odd, got {taps}")
    group = width // heads
    pad = (taps - 1) // 2
    length = x.shape[-2]

    weights = _softmax(kernel_logits.data, axis=-1)  # [H, K]
    per_channel = np.repeat(weights, group, axis=0)  # [D, K]
    pad_spec = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (0, 0)]
    xpad = np.pad(x.data, pad_spec)
    out = np.zeros_like(x.data)
    for k in range(taps):
        out += per_channel[:, k] * xpad[..., k : k + length, :]

    def backward(g):
        if x.requires_grad:
            gpad = np.zeros_like(xpad)
            for k in range(taps):
                gpad[..., k : k + length, :] += per_channel[:, k] * g
            x._accumulate(gpad[..., pad : pad + length, :])
        if kernel_logits.requires_grad:
            lead = tuple(range(g.ndim - 1))
            gw_channel = np.stack(
                [(g * xpad[..., k : k + length, :]).sum(axis=lead) for k in range(taps)],
                axis=1,
            )  # [D, K]
            gw = gw_channel.reshape(heads, group, taps).sum(axis=1)
            kernel_logits._accumulate(
                weights * (gw - (gw * weights).sum(axis=-1, keepdims=True))
            )

    return _make(out, (x, kernel_logits), backward)


def conv1d(x, weight, bias=None) -> Tensor:
    """Same-length 1-D convolution over the time axis.

    ``x`` is ``[..., T, Din]``, ``weight`` is ``[K, Din, Dout]`` (odd ``K``).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    taps = weight.shape[0]
    if taps % 2 == 0:
        raise ShapeError(f"kernel size must be odd, got {taps}")
    if weight.shape[1] != x.shape[-1]:
        raise ShapeError(f"conv1d expects {weight.shape[1]} input channels, got {x.shape[-1]}")
    pad = (taps - 1) // 2
    length = x.shape[-2]
    pad_spec = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (0, 0)]
    xpad = np.pad(x.data, pad_spec)
    # unfold to [..., T, K*Din] and do one matmul
    cols = np.concatenate([xpad[..., k : k + length, :] for k in range(taps)], axis=-1)
    flat_w = weight.data.reshape(-1, weight.shape[2])
    out = cols @ flat_w

    def backward(g):
        if weight.requires_grad:
            gw = cols.reshape(-1, cols.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            weight._accumulate(gw.reshape(weight.shape))
        if x.requires_grad:
            gcols = g @ flat_w.T
            gpad = np.zeros_like(xpad)
            din = x.shape[-1]
            for k in range(taps):
                gpad[..., k : k + length, :] += gcols[..., k * din : (k + 1) * din]
            x._accumulate(gpad[..., pad : pad + length, :])

    result = _make(out, (x, weight), backward)
    if bias is not None:
        result = result + bias
    return result


# -- losses --------------------------------------------------------------
def masked_mean(values, mask) -> Tensor:
    """Mean of ``values`` over positions where the broadcast ``mask`` is 1."""
    values = as_tensor(values)
    mask = np.broadcast_to(np.asarray(mask, dtype=DTYPE), values.shape)
    total = mask.sum()
    if total == 0:
        return Tensor(0.0)
    return (values * mask).sum() * (1.0 / total)


def l1_loss(pred, target, mask=None) -> Tensor:
    diff = absolute(as_tensor(pred) - as_tensor(target))
    if mask is None:
        return diff.mean()
    return masked_mean(diff, mask)


def mse_loss(pred, target, mask=None) -> Tensor:
    d = as_tensor(pred) - as_tensor(target)
    sq = d * d
    if mask is None:
        return sq.mean()
    return masked_mean(sq, mask)


def cross_entropy(logits, labels, mask=None) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits``.

    With ``mask`` the mean runs over positions where the mask is nonzero
    (mask values act as weights).
    """
    logits = as_tensor(logits)
    k = logits.shape[-1]
    flat = logits.data.reshape(-1, k)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size != flat.shape[0]:
        raise ShapeError(f"{labels.size} labels for {flat.shape[0]} positions")
    weight = np.ones(labels.size) if mask is None else np.asarray(mask, dtype=DTYPE).reshape(-1)
    total = weight.sum()
    if total == 0:
        return Tensor(0.0)
    shifted = flat - flat.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(labels.size)
    loss = -(weight * logp[rows, labels]).sum() / total

    def backward(g):
        probs = np.exp(logp)
        probs[rows, labels] -= 1.0
        logits._accumulate((g * weight[:, None] / total * probs).reshape(logits.shape))

    return _make(np.asarray(loss), (logits,), backward)


def grad(loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` w.r.t. ``params``; unreachable ones come back as zeros."""
    for p in params:
        p.zero_grad()
    loss.backward()
    return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
