"""Dense tensors with reverse-mode automatic differentiation.

Arrays are plain numpy buffers. Every op returns a new :class:`Tensor`; when
any input requires a gradient, the op also stores its parents and a closure
that maps the output gradient to input gradients. :func:`backward` walks the
recorded graph from a scalar loss in reverse topological order.

The op catalog is deliberately small: it covers what a gated Transformer
encoder with an MLP head and a BCE loss needs, plus a handful of structural
ops (reshape, permute, take, concat along an axis) for multi-head plumbing.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

BCE_CLAMP = 1e-7
LAYER_NORM_EPS = 1e-5


class ShapeError(ValueError):
    """Operand shapes do not conform to an op's arity rules."""


class NumericOverflowError(FloatingPointError):
    """An op produced NaN or Inf."""


class GraphError(RuntimeError):
    """Misuse of the compute graph (non-scalar loss, double backward)."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        if not np.all(np.isfinite(arr)):
            raise NumericOverflowError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self._op = "leaf"
        self._consumed = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{label}, requires_grad={self.requires_grad})"

    # operator sugar for the common cases
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype if dtype is not None else np.float64)
    return Tensor(arr)


def _finite(op: str, out: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(out)):
        raise NumericOverflowError(f"{op}: non-finite output")
    return out


def _make(op: str, out: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = _finite(op, out)
    t.requires_grad = any(p.requires_grad for p in parents)
    t.grad = None
    t.name = None
    t._op = op
    t._consumed = False
    if t.requires_grad:
        t._parents = tuple(parents)
        t._backward = backward_fn
    else:
        t._parents = ()
        t._backward = None
    return t


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy right-aligned broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    # right-aligned; the smaller operand must be a suffix-compatible shape
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# Primitive catalog
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched ``a @ b``. ``b`` may be 2-D and shared across the batch dims of ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    if b.data.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ, {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            if b.data.ndim == 2 and gb.ndim > 2:
                gb = gb.reshape(-1, *gb.shape[-2:]).sum(axis=0)
        return ga, gb

    return _make("matmul", out, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    out = a.data + b.data

    def backward(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _make("add", out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    out = a.data * b.data

    def backward(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _make("mul", out, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a Python constant."""
    a = as_tensor(a)
    c = float(c)

    def backward(g):
        return (g * c,)

    return _make("scale", a.data * c, (a,), backward)


def scale_rows(x: Tensor, g: Tensor) -> Tensor:
    """Row ``t`` of ``x`` (shape ``[..., T, d]``) multiplied by scalar ``g[..., t]``."""
    x, g = as_tensor(x), as_tensor(g)
    if x.data.ndim < 2 or g.shape != x.shape[:-1]:
        raise ShapeError(f"scale_rows: rows {x.shape} do not match scales {g.shape}")
    out = x.data * g.data[..., None]

    def backward(grad):
        gx = grad * g.data[..., None] if x.requires_grad else None
        gg = (grad * x.data).sum(axis=-1) if g.requires_grad else None
        return gx, gg

    return _make("scale_rows", out, (x, g), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    nd = tensors[0].data.ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.data.ndim != nd or t.shape[:ax] + t.shape[ax + 1:] != tensors[0].shape[:ax] + tensors[0].shape[ax + 1:]:
            raise ShapeError(f"concat: shapes {tensors[0].shape} and {t.shape} differ off axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) if t.requires_grad else None
            for i, t in enumerate(tensors)
        )

    return _make("concat", out, tensors, backward)


def concat_lastdim(tensors: Sequence[Tensor]) -> Tensor:
    return concat(tensors, axis=-1)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Rows of ``table`` ([V, d]) gathered by integer ``ids`` of any shape."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ShapeError(f"embedding_lookup: ids must be integers, got {ids.dtype}")
    if table.data.ndim != 2:
        raise ShapeError(f"embedding_lookup: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding_lookup: id out of range [0, {table.shape[0]}) for table {table.shape}")
    out = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _make("embedding_lookup", out, (table,), backward)


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    d = x.data
    # split evaluation keeps exp() from overflowing
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype, copy=False)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _make("sigmoid", out, (x,), backward)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    out = np.where(pos, x.data, 0).astype(x.dtype, copy=False)

    def backward(g):
        return (g * pos,)

    return _make("relu", out, (x,), backward)


def softmax_lastdim(x: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis.

    ``mask`` (broadcastable boolean, True = keep) gives masked entries an
    effective logit of minus infinity: they get exactly zero weight.
    """
    x = as_tensor(x)
    d = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), d.shape)
        if not mask.any(axis=-1).all():
            raise ValueError("softmax_lastdim: a row has every position masked")
        shifted = np.where(mask, d, -np.inf)
        m = shifted.max(axis=-1, keepdims=True)
        e = np.where(mask, np.exp(np.where(mask, d, 0) - m), 0)
    else:
        m = d.max(axis=-1, keepdims=True)
        e = np.exp(d - m)
    out = (e / e.sum(axis=-1, keepdims=True)).astype(d.dtype, copy=False)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make("softmax_lastdim", out, (x,), backward)


def layer_norm(x: Tensor, gamma: Optional[Tensor] = None, beta: Optional[Tensor] = None,
               eps: float = LAYER_NORM_EPS) -> Tensor:
    x = as_tensor(x)
    n = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat
    parents = [x]
    if gamma is not None:
        gamma, beta = as_tensor(gamma), as_tensor(beta)
        if gamma.shape != (n,) or beta.shape != (n,):
            raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} vs feature dim {n}")
        out = xhat * gamma.data + beta.data
        parents += [gamma, beta]

    def backward(g):
        gxhat = g * gamma.data if gamma is not None else g
        gx = None
        if x.requires_grad:
            gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                        - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        if gamma is None:
            return (gx,)
        lead = tuple(range(g.ndim - 1))
        return (gx,
                (g * xhat).sum(axis=lead) if gamma.requires_grad else None,
                g.sum(axis=lead) if beta.requires_grad else None)

    return _make("layer_norm", out, parents, backward)


def mean_over_time(x: Tensor, mask) -> Tensor:
    """Masked mean of ``x`` ([B, T, d]) over T; ``mask`` is [B, T] booleans."""
    x = as_tensor(x)
    mask = np.asarray(mask, dtype=bool)
    if x.data.ndim != 3 or mask.shape != x.shape[:2]:
        raise ShapeError(f"mean_over_time: input {x.shape} vs mask {mask.shape}")
    counts = mask.sum(axis=1)
    if (counts == 0).any():
        raise ValueError("mean_over_time: a row has no unmasked positions")
    w = (mask / counts[:, None]).astype(x.dtype)
    out = np.einsum("bt,btd->bd", w, x.data)

    def backward(g):
        return (w[:, :, None] * g[:, None, :],)

    return _make("mean_over_time", out, (x,), backward)


def bce(y_hat: Tensor, y) -> Tensor:
    """Mean binary cross-entropy; predictions clamped to [1e-7, 1 - 1e-7]."""
    y_hat = as_tensor(y_hat)
    y = np.asarray(y, dtype=y_hat.dtype).reshape(y_hat.shape)
    p = np.clip(y_hat.data, BCE_CLAMP, 1.0 - BCE_CLAMP)
    n = y_hat.data.size
    losses = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    out = np.asarray(losses.mean(), dtype=y_hat.dtype)
    inside = (y_hat.data >= BCE_CLAMP) & (y_hat.data <= 1.0 - BCE_CLAMP)

    def backward(g):
        return (g * inside * (-(y / p) + (1.0 - y) / (1.0 - p)) / n,)

    return _make("bce", out, (y_hat,), backward)


# structural helpers -------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None

    def backward(g):
        return (g.reshape(x.shape),)

    return _make("reshape", out, (x,), backward)


def permute(x: Tensor, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return _make("permute", np.transpose(x.data, axes), (x,), backward)


def take(x: Tensor, index: int, axis: int) -> Tensor:
    """Select a single index along ``axis`` (the axis is dropped)."""
    x = as_tensor(x)
    out = np.take(x.data, index, axis=axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        sl = [slice(None)] * x.data.ndim
        sl[axis] = index
        gx[tuple(sl)] = g
        return (gx,)

    return _make("take", out, (x,), backward)


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout. A no-op when ``rate`` is 0 or ``rng`` is None."""
    if rate <= 0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return mul(x, Tensor(keep))


# ---------------------------------------------------------------------------
# Reverse pass
# ---------------------------------------------------------------------------

def topological_order(root: Tensor) -> list:
    """Nodes reachable from ``root``, parents before children."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, leaves: Optional[Sequence[Tensor]] = None) -> None:
    """Accumulate dLoss/dLeaf into ``.grad`` of every grad-requiring leaf.

    Leaves passed in ``leaves`` that the loss does not depend on end up with
    an all-zero gradient instead of ``None``.
    """
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("backward already ran on this graph; rebuild the forward pass first")
    for leaf in leaves or ():
        if leaf.requires_grad and leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)
    if not loss.requires_grad:
        loss._consumed = True
        return
    order = topological_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if node.requires_grad and g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pid = id(parent)
            grads[pid] = pg if pid not in grads else grads[pid] + pg
    for node in order:
        node._consumed = True


def softmax_reference(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=np.float64) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)
