"""Dense float64 arrays with tape-based reverse-mode differentiation.

Every operation returns a new :class:`DiffArray`. When gradient recording is
enabled and at least one input requires a gradient, the output remembers its
parents and a closure that maps the output cotangent to parent cotangents.
:func:`backward` linearizes that graph into a :class:`Tape` (a topological
order) and replays it in reverse.

Matrix products whose left operand carries independent rows (activations,
queries) are evaluated in fixed blocks of ``ROW_BLOCK`` rows. OpenBLAS picks
different kernels for different row counts, which changes rounding; fixing
the block shape makes each output row a function of its input row alone, so
results do not depend on how many other rows share the call.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import NonFiniteError, NotScalarError, ShapeMismatchError, InvalidConfigError

ROW_BLOCK = 64

_SQRT_HALF = np.sqrt(0.5)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class _State(threading.local):
    def __init__(self):
        self.grad_enabled = True
        self.checked = False
        self.trackers: list[AllocationTracker] = []


_state = _State()


def set_checked(flag: bool) -> None:
    """Scan every op output for NaN/Inf and raise :class:`NonFiniteError`."""
    _state.checked = bool(flag)


def is_checked() -> bool:
    return _state.checked


@contextlib.contextmanager
def checked(flag: bool = True):
    prev = _state.checked
    _state.checked = flag
    try:
        yield
    finally:
        _state.checked = prev


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a graph (inference)."""
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class AllocationTracker:
    """Counts elements of every array produced by an op while active."""

    def __init__(self):
        self.peak = 0
        self.total = 0
        self.count = 0

    def record(self, n: int) -> None:
        self.count += 1
        self.total += n
        if n > self.peak:
            self.peak = n


@contextlib.contextmanager
def track_allocations():
    tracker = AllocationTracker()
    _state.trackers.append(tracker)
    try:
        yield tracker
    finally:
        _state.trackers.remove(tracker)


class DiffArray:
    """An n-d float64 array that may participate in differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[DiffArray, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "DiffArray":
        return DiffArray(self.data)

    def __repr__(self):
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"DiffArray(shape={self.shape}, op={self._op}{tag})"

    def __len__(self):
        return self.shape[0]

    __array_priority__ = 100

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_diff(x) -> DiffArray:
    return x if isinstance(x, DiffArray) else DiffArray(x)


def _node(data: np.ndarray, parents: Sequence[DiffArray], backward_fn: Callable, op: str) -> DiffArray:
    if _state.checked and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced by {op}")
    for tracker in _state.trackers:
        tracker.record(data.size)
    out = DiffArray.__new__(DiffArray)
    out.data = data
    out.grad = None
    out.name = None
    out._op = op
    if _state.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeMismatchError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


# ----------------------------------------------------------------------------
# elementwise


def add(a, b) -> DiffArray:
    a, b = as_diff(a), as_diff(b)
    _broadcast_shape(a, b, "add")
    return _node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> DiffArray:
    a, b = as_diff(a), as_diff(b)
    _broadcast_shape(a, b, "sub")
    return _node(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> DiffArray:
    a, b = as_diff(a), as_diff(b)
    _broadcast_shape(a, b, "mul")
    return _node(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> DiffArray:
    a, b = as_diff(a), as_diff(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data
    return _node(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
        "div",
    )


def neg(a) -> DiffArray:
    a = as_diff(a)
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def square(a) -> DiffArray:
    a = as_diff(a)
    return _node(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def sqrt(a) -> DiffArray:
    a = as_diff(a)
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def exp(a) -> DiffArray:
    a = as_diff(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def sin(a) -> DiffArray:
    a = as_diff(a)
    return _node(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),), "sin")


def cos(a) -> DiffArray:
    a = as_diff(a)
    return _node(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),), "cos")


def gelu(a) -> DiffArray:
    """Exact (erf-based) GELU."""
    a = as_diff(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _SQRT_HALF))

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _node(x * cdf, (a,), backward, "gelu")


# ----------------------------------------------------------------------------
# shape manipulation


def reshape(a, shape) -> DiffArray:
    a = as_diff(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatchError(str(exc)) from exc
    return _node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> DiffArray:
    a = as_diff(a)
    out = np.ascontiguousarray(np.transpose(a.data, axes))
    inv = None if axes is None else np.argsort(axes)
    return _node(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def take(a, key) -> DiffArray:
    """Basic or fancy indexing; repeated indices accumulate in the gradient."""
    a = as_diff(a)
    if isinstance(key, DiffArray):
        raise TypeError("index with integers or arrays, not DiffArray")
    out = np.array(a.data[key])

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        return (full,)

    return _node(out, (a,), backward, "take")


def concat(arrays: Sequence, axis: int = 0) -> DiffArray:
    arrays = [as_diff(x) for x in arrays]
    try:
        out = np.concatenate([x.data for x in arrays], axis=axis)
    except ValueError as exc:
        raise ShapeMismatchError(str(exc)) from exc
    splits = np.cumsum([x.shape[axis] for x in arrays])[:-1]
    return _node(out, arrays, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def broadcast_to(a, shape) -> DiffArray:
    a = as_diff(a)
    out = np.array(np.broadcast_to(a.data, shape))
    return _node(out, (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast_to")


# ----------------------------------------------------------------------------
# reductions


def sum_(a, axis=None, keepdims=False) -> DiffArray:
    a = as_diff(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(np.asarray(out), (a,), backward, "sum")


def mean(a, axis=None, keepdims=False) -> DiffArray:
    a = as_diff(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis, keepdims), 1.0 / float(n))


# ----------------------------------------------------------------------------
# linear algebra


def rowwise_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` computed in fixed ``ROW_BLOCK``-row slabs of ``a``.

    Each output row depends only on the matching row of ``a`` (bitwise), no
    matter how many rows ``a`` has.
    """
    m = a.shape[-2]
    nb = -(-m // ROW_BLOCK)
    pad = nb * ROW_BLOCK - m
    if pad:
        a = np.concatenate([a, np.zeros(a.shape[:-2] + (pad, a.shape[-1]))], axis=-2)
    ab = a.reshape(a.shape[:-2] + (nb, ROW_BLOCK, a.shape[-1]))
    out = np.matmul(ab, b[..., None, :, :])
    out = out.reshape(out.shape[:-3] + (nb * ROW_BLOCK, b.shape[-1]))
    return np.ascontiguousarray(out[..., :m, :])


def matmul(a, b) -> DiffArray:
    """Batched matrix product over the last two axes."""
    a, b = as_diff(a), as_diff(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatchError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise ShapeMismatchError(f"matmul batch dims differ: {a.shape} @ {b.shape}") from exc

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return _node(rowwise_matmul(a.data, b.data), (a, b), backward, "matmul")


def linear(x, weight, bias=None) -> DiffArray:
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


# ----------------------------------------------------------------------------
# normalization and attention


def softmax(x, axis: int = -1) -> DiffArray:
    """Numerically stable softmax (max-subtracted) along ``axis``."""
    x = as_diff(x)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ShapeMismatchError("softmax over an empty axis")
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _node(y, (x,), backward, "softmax")


def softmax_rows(x) -> DiffArray:
    return softmax(x, axis=-1)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> DiffArray:
    """Standardize over the last axis, then scale by ``gain`` and add ``bias``."""
    if eps <= 0:
        raise InvalidConfigError("layer_norm eps must be positive")
    x, gain, bias = as_diff(x), as_diff(gain), as_diff(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeMismatchError(f"layer_norm affine shapes {gain.shape}/{bias.shape} vs width {d}")
    xc = x.data - np.mean(x.data, axis=-1, keepdims=True)
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (
                gh
                - np.mean(gh, axis=-1, keepdims=True)
                - xhat * np.mean(gh * xhat, axis=-1, keepdims=True)
            )
        flat_g = g.reshape(-1, d)
        return (
            gx,
            (flat_g * xhat.reshape(-1, d)).sum(axis=0),
            flat_g.sum(axis=0),
        )

    return _node(xhat * gain.data + bias.data, (x, gain, bias), backward, "layer_norm")


def multi_head_cross_attention(
    q_in,
    kv_in,
    params,
    heads: int,
    scale: float | None = None,
    return_weights: bool = False,
):
    """Scaled dot-product attention of ``q_in`` rows over ``kv_in`` rows.

    ``params`` maps ``wq, wk, wv, wo`` to ``d x d`` projections and optionally
    ``bo`` to an output bias. Head ``h`` uses columns ``h*dh:(h+1)*dh`` of each
    projection. Rows of ``q_in`` never interact.
    """
    q_in, kv_in = as_diff(q_in), as_diff(kv_in)
    if q_in.ndim != 2 or kv_in.ndim != 2:
        raise ShapeMismatchError("attention inputs must be 2-d")
    a, d = q_in.shape
    b = kv_in.shape[0]
    if kv_in.shape[1] != d:
        raise ShapeMismatchError(f"query width {d} != key/value width {kv_in.shape[1]}")
    if b == 0:
        raise ShapeMismatchError("attention over zero key/value rows")
    if heads < 1 or d % heads:
        raise InvalidConfigError(f"heads={heads} does not divide width {d}")
    dh = d // heads
    if scale is None:
        scale = 1.0 / np.sqrt(dh)

    q = matmul(q_in, params["wq"]).reshape(a, heads, dh).transpose(1, 0, 2)
    k = matmul(kv_in, params["wk"]).reshape(b, heads, dh).transpose(1, 2, 0)
    v = matmul(kv_in, params["wv"]).reshape(b, heads, dh).transpose(1, 0, 2)
    weights = softmax(mul(matmul(q, k), float(scale)))
    o = matmul(weights, v).transpose(1, 0, 2).reshape(a, d)
    out = linear(o, params["wo"], params.get("bo"))
    return (out, weights) if return_weights else out


# ----------------------------------------------------------------------------
# reverse pass


class Tape:
    """Recorded operations in topological order (inputs before outputs)."""

    def __init__(self, nodes: list[DiffArray]):
        self.nodes = nodes

    @classmethod
    def record(cls, output: DiffArray) -> "Tape":
        order: list[DiffArray] = []
        seen: set[int] = set()
        stack: list[tuple[DiffArray, bool]] = [(output, False)]
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
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def leaves(self) -> list[DiffArray]:
        return [n for n in self.nodes if n.is_leaf]

    def __len__(self):
        return len(self.nodes)


def backward(loss: DiffArray, params: Iterable[DiffArray] | None = None) -> Tape:
    """Populate ``.grad`` on every requires-grad leaf reachable from ``loss``.

    Leaf gradients are overwritten, not accumulated. Any array in ``params``
    that is unreachable from ``loss`` receives a zero gradient.
    """
    if loss.size != 1:
        raise NotScalarError(f"backward needs a scalar, got shape {loss.shape}")
    tape = Tape.record(loss) if loss.requires_grad else Tape([])
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    reached = {id(n) for n in tape.nodes}
    for p in params or ():
        if id(p) not in reached:
            p.grad = np.zeros_like(p.data)
    return tape
