"""Dense-tensor engine with reverse-mode differentiation on a recorded tape.

Tensors wrap immutable numpy arrays (float32/float64). Operations executed
while a Tape is active are recorded; ``backward`` on a scalar walks the tape
once in reverse creation order (a valid reverse-topological order, since every
operation's parents are recorded before it) and accumulates leaf gradients
deterministically. A tape is consumed by ``backward`` and rejects further use.

Tracked tensors are immutable: their arrays are frozen at construction, and
parameter updates rebind ``.data`` with a fresh array instead of mutating.
"""

from __future__ import annotations

import os
import threading

import numpy as np
from scipy.special import erf

FLOAT_DTYPES = (np.float32, np.float64)

# finite-value assertions after every op; cheap insurance for debugging runs
_DEBUG_FINITE = os.environ.get("XMODSEG_DEBUG_FINITE", "0") not in ("", "0")


def set_debug_finite(enabled: bool) -> None:
    global _DEBUG_FINITE
    _DEBUG_FINITE = bool(enabled)


class TapeError(RuntimeError):
    pass


class _Node:
    __slots__ = ("parents", "backward_fn")

    def __init__(self, parents, backward_fn):
        self.parents = parents
        self.backward_fn = backward_fn


_local = threading.local()


def _tape_stack():
    stack = getattr(_local, "tape_stack", None)
    if stack is None:
        stack = []
        _local.tape_stack = stack
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed operations; one per training step."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self.consumed = False

    def __len__(self):
        return len(self._nodes)

    def _new_node(self, parents=(), backward_fn=None) -> int:
        if self.consumed:
            raise TapeError("tape already consumed by backward; build a new tape")
        self._nodes.append(_Node(parents, backward_fn))
        return len(self._nodes) - 1

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self
        return False


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


class Tensor:
    """Dense n-d real array, optionally tracked on the active tape."""

    __slots__ = ("data", "requires_grad", "node_id", "tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype, copy=True)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = _freeze(arr)
        self.requires_grad = requires_grad
        self.node_id = None
        self.tape = None

    @classmethod
    def _wrap(cls, arr) -> "Tensor":
        if not isinstance(arr, np.ndarray):
            arr = np.asarray(arr)
        if _DEBUG_FINITE and not np.isfinite(arr).all():
            raise FloatingPointError("non-finite values produced by tensor op")
        out = object.__new__(cls)
        out.data = _freeze(arr)
        out.requires_grad = False
        out.node_id = None
        out.tape = None
        return out

    # -- value management -------------------------------------------------

    def assign(self, arr: np.ndarray) -> None:
        """Rebind the stored value (parameter update); never mutates in place."""
        arr = np.array(arr, dtype=self.data.dtype, copy=True)
        if arr.shape != self.data.shape:
            raise ValueError(f"assign shape {arr.shape} != {self.data.shape}")
        self.data = _freeze(arr)
        self.node_id = None
        self.tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, _coerce(other, self.dtype))

    def __radd__(self, other):
        return add(_coerce(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _coerce(other, self.dtype))

    def __rsub__(self, other):
        return sub(_coerce(other, self.dtype), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_coerce(other, self.dtype), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axes=None, keepdims=False):
        return reduce_sum(self, axes=axes, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def permute(self, axes):
        return permute(self, axes)


def _coerce(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor._wrap(np.asarray(value, dtype=dtype).copy())


def _is_tracked(t: Tensor, tape: Tape) -> bool:
    return t.requires_grad or (t.tape is tape and t.node_id is not None)


def _node_of(t: Tensor, tape: Tape) -> int:
    # leaves join the tape lazily the first time they take part in an op
    if t.tape is not tape or t.node_id is None:
        t.node_id = tape._new_node()
        t.tape = tape
    return t.node_id


def _apply(out_data: np.ndarray, inputs, backward_fn) -> Tensor:
    tape = active_tape()
    out = Tensor._wrap(out_data)
    if tape is None or not any(_is_tracked(t, tape) for t in inputs):
        return out
    parents = tuple(_node_of(t, tape) if _is_tracked(t, tape) else -1 for t in inputs)
    out.node_id = tape._new_node(parents, backward_fn)
    out.tape = tape
    return out


class GradientMap:
    """node_id -> gradient produced by one backward pass."""

    def __init__(self, tape: Tape, grads: dict):
        self._tape = tape
        self._grads = grads

    def __contains__(self, node_id: int) -> bool:
        return node_id in self._grads

    def __getitem__(self, node_id: int) -> Tensor:
        return Tensor._wrap(self._grads[node_id].copy())

    def wrt(self, t: Tensor):
        """Raw gradient array for a tensor used in the backwarded forward, or None."""
        if t.tape is not self._tape or t.node_id is None:
            return None
        return self._grads.get(t.node_id)


def backward(loss: Tensor) -> GradientMap:
    """Reverse sweep from a scalar loss; consumes the tape.

    Returns gradients for every tensor that joined the tape as a leaf
    (requires_grad inputs); visiting order and accumulation order are fixed
    by node creation order, so repeated runs are bit-identical.
    """
    if loss.data.size != 1:
        raise TapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    tape = loss.tape
    if tape is None or loss.node_id is None:
        raise TapeError("loss is not attached to an active tape")
    if tape.consumed:
        raise TapeError("backward already ran on this tape")

    nodes = tape._nodes
    grads: list = [None] * len(nodes)
    grads[loss.node_id] = np.ones_like(loss.data)
    leaf_grads = {}
    for nid in range(loss.node_id, -1, -1):
        g = grads[nid]
        if g is None:
            continue
        node = nodes[nid]
        if node.backward_fn is None:
            leaf_grads[nid] = g
            continue
        for pid, pg in zip(node.parents, node.backward_fn(g)):
            if pid < 0 or pg is None:
                continue
            if grads[pid] is None:
                grads[pid] = pg
            else:
                grads[pid] = grads[pid] + pg
        grads[nid] = None
    tape.consumed = True
    return GradientMap(tape, leaf_grads)


# -- broadcasting helpers --------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise primitives --------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _apply(a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _apply(a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _apply(ad * bd, (a, b), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g / bd, a.shape), _unbroadcast(-g * ad / (bd * bd), b.shape)

    return _apply(ad / bd, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bwd(g):
        return (g * c,)

    return _apply(a.data * c, (a,), bwd)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bwd(g):
        return (g * out_data,)

    return _apply(out_data, (a,), bwd)


def log(a: Tensor) -> Tensor:
    ad = a.data

    def bwd(g):
        return (g / ad,)

    return _apply(np.log(ad), (a,), bwd)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bwd(g):
        return (g * mask,)

    return _apply(np.where(mask, a.data, 0.0), (a,), bwd)


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a: Tensor) -> Tensor:
    ad = a.data
    cdf = 0.5 * (1.0 + erf(ad * _INV_SQRT2))

    def bwd(g):
        pdf = np.exp(-0.5 * ad * ad) * _INV_SQRT2PI
        return (g * (cdf + ad * pdf),)

    return _apply(ad * cdf, (a,), bwd)


# -- linear algebra ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two rank-2 tensors."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        return g @ bd.T, ad.T @ g

    return _apply(ad @ bd, (a, b), bwd)


def batched_matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over matching leading batch axes: [..., m, k] x [..., k, n]."""
    if a.ndim < 3 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] \
            or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"batched_matmul shape mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _apply(ad @ bd, (a, b), bwd)


def pointwise_linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over the last (channel) axis at every position."""
    cin, cout = weight.shape
    if x.shape[-1] != cin:
        raise ValueError(f"pointwise_linear channel mismatch: x {x.shape} vs weight {weight.shape}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"pointwise_linear bias shape {bias.shape} != ({cout},)")
    xd, wd = x.data, weight.data
    out_data = xd @ wd
    if bias is not None:
        out_data = out_data + bias.data

    def bwd(g):
        gx = g @ wd.T
        gw = xd.reshape(-1, cin).T @ g.reshape(-1, cout)
        gb = None if bias is None else g.reshape(-1, cout).sum(axis=0)
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _apply(out_data, inputs, bwd)


def cosine_similarity(a: Tensor, b: Tensor, eps: float = 1e-12) -> Tensor:
    """Cosine of corresponding slices along the last axis; eps smooths the norms."""
    if a.shape != b.shape:
        raise ValueError(f"cosine_similarity shape mismatch: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    na = np.sqrt((ad * ad).sum(axis=-1) + eps * eps)
    nb = np.sqrt((bd * bd).sum(axis=-1) + eps * eps)
    s = (ad * bd).sum(axis=-1)
    c = s / (na * nb)

    def bwd(g):
        ga = (bd / (na * nb)[..., None] - ad * (c / (na * na))[..., None]) * g[..., None]
        gb = (ad / (na * nb)[..., None] - bd * (c / (nb * nb))[..., None]) * g[..., None]
        return ga, gb

    return _apply(c, (a, b), bwd)


# -- shape manipulation ------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    old = x.shape

    def bwd(g):
        return (g.reshape(old),)

    return _apply(x.data.reshape(shape), (x,), bwd)


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def bwd(g):
        return (g.transpose(inverse),)

    return _apply(x.data.transpose(axes), (x,), bwd)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    return _apply(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bwd)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    shape = x.shape

    def bwd(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[index] = g
        return (gx,)

    return _apply(x.data[index].copy(), (x,), bwd)


def reduce_sum(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    if axes is None:
        axes_t = tuple(range(x.ndim))
    elif isinstance(axes, int):
        axes_t = (axes,)
    else:
        axes_t = tuple(axes)
    shape = x.shape

    def bwd(g):
        if not keepdims:
            kept = list(shape)
            for ax in axes_t:
                kept[ax] = 1
            g = g.reshape(kept)
        return (np.broadcast_to(g, shape).copy(),)

    return _apply(x.data.sum(axis=axes_t, keepdims=keepdims), (x,), bwd)


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    old = x.shape

    def bwd(g):
        return (_unbroadcast(g, old),)

    return _apply(np.broadcast_to(x.data, shape).copy(), (x,), bwd)


def gather(x: Tensor, axis: int, index: np.ndarray) -> Tensor:
    """take_along_axis with gradient scatter-add; index is a constant int array."""
    index = np.asarray(index)
    shape = x.shape

    def bwd(g):
        gx = np.zeros(shape, dtype=g.dtype)
        grids = np.meshgrid(*[np.arange(s) for s in index.shape], indexing="ij")
        fancy = list(grids)
        fancy[axis] = index
        np.add.at(gx, tuple(fancy), g)
        return (gx,)

    return _apply(np.take_along_axis(x.data, index, axis=axis), (x,), bwd)


# -- normalisation and softmax ----------------------------------------------


def softmax(x: Tensor, axis: int) -> Tensor:
    """Stable softmax (max-subtracted) along one axis."""
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"softmax axis {axis} out of range for rank {x.ndim}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        return (out_data * (g - dot),)

    return _apply(out_data, (x,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each last-axis slice to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(f"layer_norm affine shapes {gain.shape}/{bias.shape} != ({d},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = ((xd - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (xd - mu) * inv
    gd = gain.data

    def bwd(g):
        dy = g * gd
        m1 = dy.mean(axis=-1, keepdims=True)
        m2 = (dy * y).mean(axis=-1, keepdims=True)
        gx = (dy - m1 - y * m2) * inv
        ggain = (g * y).reshape(-1, d).sum(axis=0)
        gbias = g.reshape(-1, d).sum(axis=0)
        return gx, ggain, gbias

    return _apply(y * gd + bias.data, (x, gain, bias), bwd)


# -- conveniences ------------------------------------------------------------


def mean(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    if axes is None:
        count = x.data.size
    elif isinstance(axes, int):
        count = x.shape[axes]
    else:
        count = int(np.prod([x.shape[a] for a in axes]))
    return scale(reduce_sum(x, axes=axes, keepdims=keepdims), 1.0 / count)


def zeros(shape, dtype=np.float64, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=np.float64, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)
