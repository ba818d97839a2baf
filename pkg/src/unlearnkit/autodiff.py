"""Reverse-mode automatic differentiation over numpy arrays.

Values are plain ``numpy.ndarray`` objects (float32 for model weights; the ops
preserve whatever float dtype they are given, which lets the gradient checks
run a float64 oracle through the same forward code). A :class:`Var` wraps a
value together with the rule that maps its output gradient back onto its
parents. Graphs are only recorded when at least one input requires a gradient,
so evaluation code pays almost nothing for the abstraction.

Broadcasting is deliberately narrow: elementwise binary ops accept either two
arrays of identical shape or an array plus a vector matching its last axis.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import GraphError, NumericError, ShapeError

DTYPE = np.float32

# Flipped off by callers that want raw speed inside already-validated loops.
CHECK_FINITE = True


def tensor(data, dtype=DTYPE) -> np.ndarray:
    arr = np.array(data, dtype=dtype)
    if arr.ndim == 0 or any(d <= 0 for d in arr.shape):
        raise ShapeError(f"tensor shape must be non-empty positive ints, got {arr.shape}")
    return arr


class Var:
    """A node in the differentiation graph."""

    __slots__ = ("value", "parents", "backward_fn", "requires_grad", "grad", "name", "_consumed")

    def __init__(self, value, parents=(), backward_fn=None, requires_grad=False, name=None):
        self.value = value
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._consumed = False

    @property
    def shape(self):
        return self.value.shape

    @property
    def is_leaf(self):
        return not self.parents

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Var{tag}(shape={self.value.shape}, requires_grad={self.requires_grad})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__


def leaf(value, requires_grad=True, name=None) -> Var:
    return Var(np.asarray(value), requires_grad=requires_grad, name=name)


def constant(value) -> Var:
    return Var(np.asarray(value), requires_grad=False)


def _as_var(x) -> Var:
    return x if isinstance(x, Var) else constant(x)


def _node(value, parents: Sequence[Var], backward_fn: Callable) -> Var:
    if CHECK_FINITE and not np.all(np.isfinite(value)):
        raise NumericError(f"non-finite value produced (shape {np.shape(value)})")
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Var(value)
    return Var(value, parents, backward_fn, requires_grad=True)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> bool:
    """True if ``b`` is a last-axis vector broadcast over ``a``."""
    if a.shape == b.shape:
        return False
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return True
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to_vector(g: np.ndarray) -> np.ndarray:
    return g.reshape(-1, g.shape[-1]).sum(axis=0)


def add(a, b) -> Var:
    a, b = _as_var(a), _as_var(b)
    bcast = _check_broadcast(a.value, b.value, "add")

    def backward(g):
        return g, (_reduce_to_vector(g) if bcast else g)

    return _node(a.value + b.value, (a, b), backward)


def sub(a, b) -> Var:
    a, b = _as_var(a), _as_var(b)
    bcast = _check_broadcast(a.value, b.value, "sub")

    def backward(g):
        return g, -(_reduce_to_vector(g) if bcast else g)

    return _node(a.value - b.value, (a, b), backward)


def mul(a, b) -> Var:
    a, b = _as_var(a), _as_var(b)
    bcast = _check_broadcast(a.value, b.value, "mul")
    av, bv = a.value, b.value

    def backward(g):
        gb = g * av
        return g * bv, (_reduce_to_vector(gb) if bcast else gb)

    return _node(av * bv, (a, b), backward)


def scale(a, c: float) -> Var:
    a = _as_var(a)
    c = a.value.dtype.type(c)
    return _node(a.value * c, (a,), lambda g: (g * c,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Var:
    """tanh-approximated GELU."""
    a = _as_var(a)
    x = a.value
    dt = x.dtype.type
    inner = dt(_GELU_C) * (x + dt(0.044715) * x**3)
    t = np.tanh(inner)
    out = dt(0.5) * x * (dt(1.0) + t)

    def backward(g):
        dinner = dt(_GELU_C) * (dt(1.0) + dt(3 * 0.044715) * x * x)
        d = dt(0.5) * (dt(1.0) + t) + dt(0.5) * x * (dt(1.0) - t * t) * dinner
        return (g * d,)

    return _node(out, (a,), backward)


def masked_fill(a, mask: np.ndarray, fill: float) -> Var:
    """Replace entries where ``mask`` is True by ``fill``; no gradient flows there."""
    a = _as_var(a)
    mask = np.broadcast_to(mask, a.value.shape)
    out = np.where(mask, a.value.dtype.type(fill), a.value)
    return _node(out, (a,), lambda g: (np.where(mask, 0, g).astype(g.dtype),))


# ---------------------------------------------------------------------------
# linear algebra and layout
# ---------------------------------------------------------------------------


def matmul(a, b) -> Var:
    """Matrix product. ``a`` may carry leading batch axes; ``b`` is 2-D or shares them."""
    a, b = _as_var(a), _as_var(b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul: dimension mismatch {av.shape} x {bv.shape}")
    if bv.ndim > 2 and av.shape[:-2] != bv.shape[:-2]:
        raise ShapeError(f"matmul: batch mismatch {av.shape} x {bv.shape}")

    def backward(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        if bv.ndim == 2:
            gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(av, -1, -2) @ g
        return ga, gb

    return _node(av @ bv, (a, b), backward)


def reshape(a, shape) -> Var:
    a = _as_var(a)
    src = a.value.shape
    return _node(a.value.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a, axes) -> Var:
    a = _as_var(a)
    inv = np.argsort(axes)
    return _node(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inv),))


def index(a, idx) -> Var:
    """Gather ``a[idx]`` (embedding lookup, row picking, slicing)."""
    a = _as_var(a)
    src_shape, dtype = a.value.shape, a.value.dtype

    def backward(g):
        out = np.zeros(src_shape, dtype=dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _node(a.value[idx], (a,), backward)


embedding = index


def concat(parts: Sequence, axis: int = 0) -> Var:
    parts = [_as_var(p) for p in parts]
    sizes = [p.value.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([p.value for p in parts], axis=axis), parts, backward)


def slice_axis(a, start: int, stop: int, axis: int = 0) -> Var:
    a = _as_var(a)
    sl = [slice(None)] * a.value.ndim
    sl[axis] = slice(start, stop)
    return index(a, tuple(sl))


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def sum(a, axis=None) -> Var:  # noqa: A001 - mirrors numpy naming
    a = _as_var(a)
    shape = a.value.shape

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(a.value.dtype),)

    return _node(np.asarray(a.value.sum(axis=axis)), (a,), backward)


def mean(a, axis=None) -> Var:
    a = _as_var(a)
    n = a.value.size if axis is None else a.value.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


# ---------------------------------------------------------------------------
# normalisation and probabilities
# ---------------------------------------------------------------------------


def _softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(a) -> Var:
    """Softmax over the last axis, stabilised by subtracting the row max."""
    a = _as_var(a)
    p = _softmax_np(a.value)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _node(p, (a,), backward)


def softmax_rows(a) -> Var:
    a = _as_var(a)
    if a.value.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got shape {a.value.shape}")
    return softmax(a)


def log_softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def log_softmax(a) -> Var:
    a = _as_var(a)
    out = log_softmax_np(a.value)
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _node(out, (a,), backward)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Var:
    x, gain, bias = _as_var(x), _as_var(gain), _as_var(bias)
    xv, gv = x.value, gain.value
    d = xv.shape[-1]
    if gv.shape != (d,) or bias.value.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias must have shape ({d},)")
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + xv.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gv + bias.value

    def backward(g):
        gxhat = g * gv
        gx = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, _reduce_to_vector(g * xhat), _reduce_to_vector(g)

    return _node(out, (x, gain, bias), backward)


def cross_entropy(logits, targets, weights=None) -> Var:
    """Mean next-token negative log-likelihood.

    ``logits`` is ``[N, V]`` and ``targets`` holds N ids. ``weights`` (0/1 per
    row) excludes padding; the mean is taken over the weighted rows.
    """
    logits = _as_var(logits)
    lv = logits.value
    if lv.ndim != 2:
        raise ShapeError(f"cross_entropy expects [N, V] logits, got {lv.shape}")
    targets = np.asarray(targets, dtype=np.int64)
    n, v = lv.shape
    if targets.shape != (n,):
        raise ShapeError(f"cross_entropy: {targets.shape[0] if targets.ndim else 0} targets for {n} rows")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise ShapeError(f"cross_entropy: target id out of range for vocab size {v}")
    w = np.ones(n, dtype=lv.dtype) if weights is None else np.asarray(weights, dtype=lv.dtype)
    total = w.sum()
    if total <= 0:
        raise ShapeError("cross_entropy: no positions to score")
    lsm = log_softmax_np(lv)
    rows = np.arange(n)
    nll = -lsm[rows, targets]
    loss = np.asarray((nll * w).sum() / total, dtype=lv.dtype)

    def backward(g):
        grad = np.exp(lsm)
        grad[rows, targets] -= 1
        return (grad * (w / total)[:, None] * g,)

    return _node(loss, (logits,), backward)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def _topo_order(root: Var) -> list[Var]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Var) -> dict[Var, np.ndarray]:
    """Populate ``.grad`` on every leaf reachable from ``loss`` and return them.

    Each graph may be differentiated once; call :func:`reset` first to reuse it.
    """
    if loss.value.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    if loss._consumed:
        raise GraphError("backward already ran on this graph; call reset() first")
    loss._consumed = True
    if not loss.requires_grad:
        return {}
    grads = {id(loss): np.ones_like(loss.value)}
    leaves: dict[Var, np.ndarray] = {}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g
            leaves[node] = g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg, dtype=parent.value.dtype)
    return leaves


def reset(loss: Var, leaves: Iterable[Var] = ()) -> None:
    loss._consumed = False
    for v in leaves:
        v.grad = None
