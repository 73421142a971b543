"""Dense tensors with reverse-mode automatic differentiation on top of numpy.

Every differentiable op records a :class:`Node` holding its inputs and whatever
the adjoint rule needs.  Adjoint rules live in ``ADJOINTS`` keyed by op name so
they can be audited (and replaced) one at a time.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Sequence

import numpy as np

MASK_FILL = -1e9

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, evaluation)."""
    previous = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


class Node:
    __slots__ = ("op", "inputs", "saved")

    def __init__(self, op: str, inputs: tuple, saved):
        self.op = op
        self.inputs = inputs
        self.saved = saved


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "__weakref__")

    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node: Node | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)


TensorLike = Tensor | np.ndarray | float | int

ADJOINTS: dict[str, Callable[[Node, np.ndarray], tuple]] = {}


def adjoint(op: str):
    def register(fn):
        ADJOINTS[op] = fn
        return fn

    return register


def as_tensor(x: TensorLike, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(op: str, data: np.ndarray, inputs: tuple, saved=None) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, inputs, saved)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------- backward


def tape(root: Tensor) -> list[Tensor]:
    """Tensors reachable from ``root`` that require grad, inputs before outputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        t, done = stack.pop()
        if done:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for parent in t.node.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires_grad tensor reachable from ``loss``.

    Gradients accumulate across calls until :meth:`Tensor.zero_grad`.
    """
    if loss.data.ndim != 0:
        raise ValueError(f"backward needs a scalar root, got shape {loss.shape}")
    if loss.node is None:
        raise ValueError("backward called on a tensor with no recorded operations")
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(tape(loss)):
        g = pending.pop(id(t), None)
        if g is None:
            continue
        t.grad = g if t.grad is None else t.grad + g
        if t.node is None:
            continue
        in_grads = ADJOINTS[t.node.op](t.node, g)
        for parent, pg in zip(t.node.inputs, in_grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise AssertionError(
                    f"adjoint of {t.node.op} returned shape {pg.shape} for input {parent.shape}"
                )
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg


# ------------------------------------------------------------- arithmetic


def add(a: TensorLike, b: TensorLike) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    return _make("add", a.data + b.data, (a, b))


@adjoint("add")
def _add_adj(node, g):
    a, b = node.inputs
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    return _make("sub", a.data - b.data, (a, b))


@adjoint("sub")
def _sub_adj(node, g):
    a, b = node.inputs
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    """Hadamard product (numpy broadcasting; adjoints reduce broadcast axes)."""
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    return _make("mul", a.data * b.data, (a, b))


@adjoint("mul")
def _mul_adj(node, g):
    a, b = node.inputs
    ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
    gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
    return ga, gb


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., k] @ b[k, n]`` or batched ``a[..., m, k] @ b[..., k, n]``."""
    a = as_tensor(a)
    b = as_tensor(b, a)
    if b.ndim == 2 and a.ndim >= 1:
        if a.shape[-1] != b.shape[0]:
            raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    elif a.ndim == b.ndim and a.ndim >= 3:
        if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
            raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    else:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _make("matmul", a.data @ b.data, (a, b))


@adjoint("matmul")
def _matmul_adj(node, g):
    a, b = node.inputs
    if b.ndim == 2:
        ga = g @ b.data.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            k = a.shape[-1]
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, b.shape[1])
        return ga, gb
    ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
    gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
    return ga, gb


def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return _make("sum", np.sum(x.data, axis=axis, keepdims=keepdims), (x,), (axis, keepdims))


@adjoint("sum")
def _sum_adj(node, g):
    (x,) = node.inputs
    axis, keepdims = node.saved
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, x.shape).copy(),)


# ------------------------------------------------------------- elementwise


def tanh(x: Tensor) -> Tensor:
    return _make("tanh", np.tanh(x.data), (x,))


@adjoint("tanh")
def _tanh_adj(node, g):
    (x,) = node.inputs
    y = np.tanh(x.data)
    return (g * (1.0 - y * y),)


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _make("sigmoid", y, (x,), y)


@adjoint("sigmoid")
def _sigmoid_adj(node, g):
    y = node.saved
    return (g * y * (1.0 - y),)


def _masked_logits(x: np.ndarray, mask) -> np.ndarray:
    if mask is None:
        return x
    return x + (1.0 - np.asarray(mask, dtype=x.dtype)) * MASK_FILL


def softmax(x: Tensor, axis: int = -1, mask=None) -> Tensor:
    """Softmax along ``axis``; positions where ``mask`` is 0 get probability 0."""
    if x.shape[axis] == 0:
        raise ValueError("softmax over an empty axis")
    logits = _masked_logits(x.data, mask)
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    return _make("softmax", y, (x,), (y, axis))


@adjoint("softmax")
def _softmax_adj(node, g):
    y, axis = node.saved
    return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)


def log_softmax(x: Tensor, axis: int = -1, mask=None) -> Tensor:
    if x.shape[axis] == 0:
        raise ValueError("log_softmax over an empty axis")
    logits = _masked_logits(x.data, mask)
    shifted = logits - logits.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    return _make("log_softmax", out, (x,), (out, axis))


@adjoint("log_softmax")
def _log_softmax_adj(node, g):
    out, axis = node.saved
    return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    return _make("layer_norm", xhat * gain.data + bias.data, (x, gain, bias), (xhat, inv_std))


@adjoint("layer_norm")
def _layer_norm_adj(node, g):
    x, gain, bias = node.inputs
    xhat, inv_std = node.saved
    lead = tuple(range(g.ndim - 1))
    g_gain = (g * xhat).sum(axis=lead) if gain.requires_grad else None
    g_bias = g.sum(axis=lead) if bias.requires_grad else None
    gx = None
    if x.requires_grad:
        gh = g * gain.data
        gx = inv_std * (
            gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
        )
    return gx, g_gain, g_bias


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Elementwise binary cross-entropy of sigmoid(logits) against 0/1 targets."""
    t = np.asarray(targets, dtype=logits.dtype)
    x = logits.data
    out = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
    return _make("bce_with_logits", out, (logits,), t)


@adjoint("bce_with_logits")
def _bce_adj(node, g):
    (x,) = node.inputs
    return (g * (_sigmoid(x.data) - node.saved),)


# ------------------------------------------------------------ structural


def mean_pool(x: Tensor, mask, axis: int, live=None) -> Tensor:
    """Masked mean of ``x`` over ``axis``.

    ``mask`` covers ``x.shape[:axis + 1]``.  A slice with no unmasked entry is
    rejected unless ``live`` marks it as padding (0), in which case it pools to 0.
    """
    axis = axis % x.ndim
    mask = np.asarray(mask, dtype=x.dtype)
    if mask.shape != x.shape[: axis + 1]:
        raise ValueError(f"mask shape {mask.shape} does not cover {x.shape[:axis + 1]}")
    counts = mask.sum(axis=axis)
    empty = counts == 0
    if live is not None:
        empty &= np.asarray(live, dtype=bool)
    if np.any(empty):
        raise ValueError("mean_pool over a fully masked slice")
    weights = mask / np.expand_dims(np.maximum(counts, 1.0), axis)
    weights = weights.reshape(weights.shape + (1,) * (x.ndim - axis - 1))
    return _make("mean_pool", (x.data * weights).sum(axis=axis), (x,), (weights, axis))


@adjoint("mean_pool")
def _mean_pool_adj(node, g):
    weights, axis = node.saved
    return (np.expand_dims(g, axis) * weights,)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    return _make("concat", data, tensors, (axis, np.cumsum(sizes)[:-1]))


@adjoint("concat")
def _concat_adj(node, g):
    axis, cuts = node.saved
    return tuple(np.split(g, cuts, axis=axis))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    return _make("stack", np.stack([t.data for t in tensors], axis=axis), tensors, axis)


@adjoint("stack")
def _stack_adj(node, g):
    axis = node.saved
    return tuple(np.take(g, i, axis=axis) for i in range(len(node.inputs)))


def getitem(x: Tensor, index) -> Tensor:
    return _make("getitem", x.data[index], (x,), index)


@adjoint("getitem")
def _getitem_adj(node, g):
    (x,) = node.inputs
    out = np.zeros_like(x.data)
    out[node.saved] += g
    return (out,)


def reshape(x: Tensor, shape) -> Tensor:
    return _make("reshape", x.data.reshape(shape), (x,))


@adjoint("reshape")
def _reshape_adj(node, g):
    return (g.reshape(node.inputs[0].shape),)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    return _make("transpose", np.transpose(x.data, axes), (x,), axes)


@adjoint("transpose")
def _transpose_adj(node, g):
    return (np.transpose(g, np.argsort(node.saved)),)


def embedding(weight: Tensor, ids) -> Tensor:
    """Row lookup ``weight[ids]``."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"token id out of range [0, {weight.shape[0]})")
    return _make("embedding", weight.data[ids], (weight,), ids)


@adjoint("embedding")
def _embedding_adj(node, g):
    (w,) = node.inputs
    out = np.zeros_like(w.data)
    np.add.at(out, node.saved.reshape(-1), g.reshape(-1, w.shape[1]))
    return (out,)


def pick(x: Tensor, ids) -> Tensor:
    """``x[..., ids[...]]``: one entry of the last axis per leading position."""
    ids = np.asarray(ids)[..., None]
    return _make("pick", np.take_along_axis(x.data, ids, axis=-1)[..., 0], (x,), ids)


@adjoint("pick")
def _pick_adj(node, g):
    (x,) = node.inputs
    out = np.zeros_like(x.data)
    np.put_along_axis(out, node.saved, g[..., None], axis=-1)
    return (out,)


def zeros(shape, dtype=np.float64) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype))

