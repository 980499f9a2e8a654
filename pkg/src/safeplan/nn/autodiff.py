"""Tape-based reverse-mode differentiation over numpy arrays.

Operations executed while a :class:`Graph` is active are appended to its tape
in execution order, which is already a topological order. Outside of a graph
nothing is recorded, so the same network code doubles as a no-grad path for
acting and planning.

Arrays default to float32. Everything preserves the dtype of its inputs, which
lets the finite-difference oracle re-run a forward pass in float64 by handing
in float64 parameters.
"""
from __future__ import annotations

import itertools

import numpy as np
from scipy import special

from safeplan.errors import NumericError, ShapeError

DTYPE = np.float32

_graphs: list["Graph"] = []
_ids = itertools.count()


class Graph:
    """Operation tape. Use as a context manager around a forward pass."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self):
        _graphs.append(self)
        return self

    def __exit__(self, *exc):
        _graphs.pop()
        return False

    def __len__(self):
        return len(self.nodes)


class Replay:
    """Record values produced at fixed program points, then play them back.

    The finite-difference oracle uses this to hold sampled noise,
    stop-gradient outputs and the branch taken by piecewise ops at their
    unperturbed values, which is exactly the function whose derivative the
    tape computes. Values are keyed by channel
    and consumed in call order, so the replayed program must be deterministic.
    """

    active: "Replay | None" = None

    def __init__(self):
        self.recorded: dict[str, list] = {}
        self.cursors: dict[str, int] | None = None

    def __enter__(self):
        Replay.active = self
        return self

    def __exit__(self, *exc):
        Replay.active = None
        return False

    def replay(self) -> "Replay":
        self.cursors = {k: 0 for k in self.recorded}
        return self

    def draw(self, channel: str, fresh):
        if self.cursors is None:
            value = fresh()
            self.recorded.setdefault(channel, []).append(value)
            return value
        i = self.cursors.get(channel, 0)
        self.cursors[channel] = i + 1
        return self.recorded[channel][i]


def replayed(channel: str, fresh):
    """``fresh()`` normally; the recorded or replayed value inside a :class:`Replay`."""
    if Replay.active is None:
        return fresh()
    return Replay.active.draw(channel, fresh)


def recording() -> bool:
    return bool(_graphs)


def current_graph() -> "Graph | None":
    return _graphs[-1] if _graphs else None


class Tensor:
    __slots__ = ("data", "requires_grad", "parents", "backward", "op", "id", "__weakref__")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, (np.ndarray, np.floating)) and dtype is None and data.dtype in (np.float32, np.float64):
            self.data = np.asarray(data)
        else:
            self.data = np.asarray(data, dtype=dtype or DTYPE)
        self.requires_grad = requires_grad
        self.parents = ()
        self.backward = None
        self.op = "leaf"
        self.id = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.data.shape}, dtype={self.data.dtype})"

    def _const(self, other):
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        return add(self, self._const(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, self._const(other))

    def __rsub__(self, other):
        return sub(self._const(other), self)

    def __mul__(self, other):
        return mul(self, self._const(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, self._const(other))

    def __rtruediv__(self, other):
        return div(self._const(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(data, requires_grad=False):
    return Tensor(np.asarray(data, dtype=DTYPE), requires_grad=requires_grad)


UNTAPED = "untaped"


def _node(data, parents, backward, op):
    out = Tensor(data)
    if _graphs:
        for p in parents:
            if p.requires_grad:
                out.requires_grad = True
                out.parents = parents
                out.backward = backward
                out.op = op
                _graphs[-1].nodes.append(out)
                break
    else:
        for p in parents:
            if p.requires_grad or p.op == UNTAPED:
                out.op = UNTAPED  # gradient-carrying inputs, but nothing is recording
                break
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise arithmetic --------------------------------------------------

def add(a, b):
    return _node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    return _node(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b):
    def backward(g):
        return (g * b.data if a.requires_grad else None), (g * a.data if b.requires_grad else None)

    return _node(a.data * b.data, (a, b), backward, "mul")


def div(a, b):
    out = a.data / b.data
    return _node(out, (a, b), lambda g: (g / b.data, -g * out / b.data), "div")


def neg(a):
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def square(a):
    return _node(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def exp(a):
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a):
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def tanh(a):
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid(x):
    return special.expit(x)


def sigmoid(a):
    out = _sigmoid(a.data)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def _softplus(x):
    return np.logaddexp(0.0, x).astype(x.dtype, copy=False)


def softplus(a):
    return _node(_softplus(a.data), (a,), lambda g: (g * _sigmoid(a.data),), "softplus")


def log_sigmoid(a):
    """log(sigmoid(x)) computed as -softplus(-x); finite for any finite x."""
    out = -_softplus(-a.data)
    return _node(out, (a,), lambda g: (g * _sigmoid(-a.data),), "log_sigmoid")


def elu(a):
    x = a.data
    # exp(min(x, 0)) is also the derivative on both branches
    e = np.minimum(x, 0.0)
    np.exp(e, out=e)
    out = np.maximum(x, 0.0)
    out += e
    out -= 1.0
    return _node(out, (a,), lambda g: (g * e,), "elu")


def normal_cdf(a):
    """Standard normal CDF."""
    out = special.ndtr(a.data)
    pdf = np.exp(-0.5 * a.data * a.data) / np.sqrt(2.0 * np.pi)
    return _node(out, (a,), lambda g: (g * pdf.astype(a.data.dtype),), "normal_cdf")


def maximum(a, floor: float):
    """max(a, floor) against a constant; zero gradient where the floor wins."""
    mask = replayed("branch", lambda: a.data > floor)
    out = np.where(mask, a.data, np.asarray(floor, a.data.dtype))
    return _node(out, (a,), lambda g: (g * mask,), "maximum")


def clip(a, lo: float, hi: float):
    below, above = replayed("branch", lambda: (a.data < lo, a.data > hi))
    mask = ~(below | above)
    out = np.where(below, np.asarray(lo, a.data.dtype), np.where(above, np.asarray(hi, a.data.dtype), a.data))
    return _node(out, (a,), lambda g: (g * mask,), "clip")


def clip_st(a, lo: float, hi: float):
    """Clip in the forward pass, identity in the backward pass (straight-through).

    Written as ``a + offset`` with a constant offset, which is the function
    the backward rule differentiates.
    """
    if Replay.active is None:
        out = np.clip(a.data, lo, hi)
    else:
        out = a.data + replayed("sg", lambda: np.clip(a.data, lo, hi) - a.data)
    return _node(out, (a,), lambda g: (g,), "clip_st")


def stop_gradient(a):
    """Same values, no gradient path back to ``a``."""
    return Tensor(replayed("sg", lambda: a.data))


sg = stop_gradient


# -- linear algebra and shape ------------------------------------------------

def matmul(a, b):
    if a.data.shape[-1] != b.data.shape[0 if b.data.ndim == 1 else -2]:
        raise ShapeError(f"matmul shape mismatch {a.data.shape} @ {b.data.shape}")
    if b.data.ndim == 2 and a.data.ndim > 2:
        # (..., k) @ (k, n): fold the leading axes into one plain 2-D product
        lead = a.data.shape[:-1]
        a2 = a.data.reshape(-1, a.data.shape[-1])

        def backward(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.data.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _node((a2 @ b.data).reshape(lead + (b.data.shape[1],)), (a, b), backward, "matmul")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _node(a.data @ b.data, (a, b), backward, "matmul")


def sum_(a, axis=None, keepdims=False):
    shape = a.data.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _node(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    shape = a.data.shape
    n = float(a.data.size if axis is None else np.prod([shape[i] for i in np.atleast_1d(axis)]))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape),)

    return _node(np.asarray(a.data.mean(axis=axis, keepdims=keepdims)), (a,), backward, "mean")


def reshape(a, shape):
    old = a.data.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def _is_basic_index(idx) -> bool:
    """Ints, slices, None and Ellipsis never select an element twice."""
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a, idx):
    shape, dtype = a.data.shape, a.data.dtype

    basic = _is_basic_index(idx)

    def backward(g):
        out = np.zeros(shape, dtype)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)  # integer-array indices may repeat; those must accumulate
        return (out,)

    return _node(a.data[idx], (a,), backward, "getitem")


def concat(tensors, axis=-1):
    tensors = tuple(tensors)
    sizes = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def stack(tensors, axis=0):
    tensors = tuple(tensors)

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _node(np.stack([t.data for t in tensors], axis=axis), tensors, backward, "stack")


def split(a, n, axis=-1):
    """Split into ``n`` equal chunks along ``axis``."""
    size = a.data.shape[axis] // n
    out = []
    for i in range(n):
        idx = [slice(None)] * a.data.ndim
        idx[axis] = slice(i * size, (i + 1) * size)
        out.append(getitem(a, tuple(idx)))
    return out


# -- backward pass -----------------------------------------------------------

def backward(loss: Tensor, graph: Graph, check_finite=False) -> dict:
    """Propagate d(loss)/d(node) through the tape. Returns {tensor id: grad}."""
    if loss.data.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.data.shape}")
    if loss.op == UNTAPED:
        raise ValueError("loss was computed outside any Graph context, so no gradient path was recorded")
    if loss.requires_grad and not any(n is loss for n in reversed(graph.nodes)):
        raise ValueError("loss was not recorded on the given graph")
    grads = {loss.id: np.ones_like(loss.data)}
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        _propagate(graph, grads, check_finite)
    return grads


def _propagate(graph: Graph, grads: dict, check_finite: bool):
    for node in reversed(graph.nodes):
        g = grads.pop(node.id, None)
        if g is None:
            continue
        pgs = node.backward(g)
        for p, pg in zip(node.parents, pgs):
            if pg is None or not p.requires_grad:
                continue
            pg = _unbroadcast(np.asarray(pg), p.data.shape)
            if check_finite and not np.all(np.isfinite(pg)):
                raise NumericError(f"non-finite gradient produced by op '{node.op}' (node {node.id})", op=node.op)
            prev = grads.get(p.id)
            grads[p.id] = pg if prev is None else prev + pg


def grad(loss: Tensor, graph: Graph, params) -> dict:
    """d(loss)/d(param) for every entry of ``params`` (a name -> Tensor mapping).

    Parameters that the loss does not depend on get a zero gradient.
    Raises NumericError naming the offending op if a NaN/Inf appears.
    """
    if not np.all(np.isfinite(loss.data)):
        raise NumericError("loss is not finite", op="loss")
    grads = backward(loss, graph)
    out = {}
    for name, p in params.items():
        g = grads.get(p.id)
        out[name] = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=p.data.dtype)
    if not all(np.all(np.isfinite(g)) for g in out.values()):
        backward(loss, graph, check_finite=True)  # re-run to locate the op
        raise NumericError("non-finite gradient", op="unknown")
    return out
