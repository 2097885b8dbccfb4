"""Dense tensors with reverse-mode automatic differentiation.

A `Tensor` wraps a row-major float32/float64 numpy array. Operations record
nodes onto a global tape (`Graph`) whenever gradients are enabled and at
least one input requires them; `backward` replays the tape once, in reverse
recording order, accumulating gradients additively into `.grad`.

Every operation validates that its output is finite and raises
`NumericError` otherwise; NaN/Inf never propagate silently.
"""

from __future__ import annotations

import weakref
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import GraphError, NumericError, ShapeError

DTYPES = {"f32": np.float32, "f64": np.float64}
DEFAULT_DTYPE = np.float32


def _as_dtype(dtype) -> np.dtype:
    if dtype is None:
        return np.dtype(DEFAULT_DTYPE)
    if isinstance(dtype, str):
        if dtype not in DTYPES:
            raise ShapeError(f"unsupported dtype {dtype!r}; expected f32 or f64")
        return np.dtype(DTYPES[dtype])
    d = np.dtype(dtype)
    if d not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ShapeError(f"unsupported dtype {d}; expected float32 or float64")
    return d


def check_finite(arr: np.ndarray, context: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values produced by {context}")


# ---------------------------------------------------------------------------
# recording infrastructure


class Node:
    """One recorded operation: inputs, output, and its backward rule."""

    __slots__ = ("op", "inputs", "output", "backward_rule")

    def __init__(self, op: str, inputs: tuple["Tensor", ...], output: "Tensor",
                 backward_rule: Callable[[np.ndarray], Sequence[np.ndarray | None]]):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_rule = backward_rule


class Graph:
    """Ordered tape of recorded nodes; inputs always precede their consumers."""

    def __init__(self):
        self.nodes: list[Node] = []

    def clear(self) -> None:
        self.nodes.clear()


_graph = Graph()
_grad_enabled = True


def active_graph() -> Graph:
    return _graph


def grad_enabled() -> bool:
    return _grad_enabled


class no_grad:
    """Context manager that disables tape recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class _MemoryTracker:
    """Tracks live tensor bytes; `peak` is the analytic high-water mark."""

    def __init__(self):
        self.enabled = False
        self.live = 0
        self.peak = 0

    def start(self):
        self.enabled = True
        self.live = 0
        self.peak = 0

    def stop(self) -> int:
        self.enabled = False
        return self.peak

    def _register(self, tensor: "Tensor"):
        nbytes = tensor.data.nbytes
        self.live += nbytes
        self.peak = max(self.peak, self.live)

        def _release(tracker=self, n=nbytes):
            tracker.live -= n

        weakref.finalize(tensor, _release)


memory_tracker = _MemoryTracker()


class _MacCounter:
    """Accumulates multiply-accumulate counts while active.

    Only convolution, explicit matmul, and bilinear upsampling contribute,
    matching the analytic accounting in `network.estimate_macs`.
    """

    def __init__(self):
        self.active = False
        self.total = 0

    def start(self):
        self.active = True
        self.total = 0

    def stop(self) -> int:
        self.active = False
        return self.total

    def add(self, n: int):
        if self.active:
            self.total += int(n)


macs_counter = _MacCounter()


# ---------------------------------------------------------------------------
# tensor


class Tensor:
    """Dense N-dimensional float array with optional gradient accumulation."""

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if isinstance(data, (np.ndarray, np.generic)) and dtype is None:
            # 0-d results of numpy arithmetic arrive as scalars; keep their
            # float width instead of silently coercing to the default
            if data.dtype not in (np.float32, np.float64):
                data = np.asarray(data, dtype=DEFAULT_DTYPE)
        else:
            data = np.asarray(data, dtype=_as_dtype(dtype))
        # ascontiguousarray would promote 0-d arrays to shape (1,)
        self.data: np.ndarray = np.asarray(data, order="C")
        check_finite(self.data, "tensor construction")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        if memory_tracker.enabled:
            memory_tracker._register(self)

    # -- basic structure ----------------------------------------------------

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
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        """Copy of the underlying values."""
        return self.data.copy()

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() on tensor of size {self.size}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def astype(self, dtype) -> "Tensor":
        d = _as_dtype(dtype)
        return Tensor(self.data.astype(d), requires_grad=self.requires_grad)

    # -- arithmetic (delegates to the op functions below) --------------------

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, *shape)

    def permute(self, *axes) -> "Tensor":
        return permute(self, *axes)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def backward(self) -> None:
        backward(self)


def apply_op(op: str, out_data: np.ndarray,
             inputs: tuple[Tensor, ...],
             backward_rule: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Wrap an op result, recording a tape node when gradients are active."""
    check_finite(out_data, op)
    needs = _grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        _graph.nodes.append(Node(op, inputs, out, backward_rule))
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into `.grad` of every reachable tensor."""
    if loss.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not _graph.nodes:
        raise GraphError("backward on an empty graph")
    if not loss.requires_grad:
        raise GraphError("loss does not require grad; nothing was recorded for it")
    seed = np.ones_like(loss.data)
    loss.grad = seed if loss.grad is None else loss.grad + seed
    try:
        for node in reversed(_graph.nodes):
            g = node.output.grad
            if g is None:
                continue
            grads = node.backward_rule(g)
            for t, gi in zip(node.inputs, grads):
                if gi is None or not t.requires_grad:
                    continue
                if gi.shape != t.data.shape:
                    raise ShapeError(
                        f"backward of {node.op}: grad shape {gi.shape} != input shape {t.data.shape}")
                check_finite(gi, f"backward of {node.op}")
                t.grad = gi if t.grad is None else t.grad + gi
    finally:
        _graph.clear()


# ---------------------------------------------------------------------------
# helpers


def _coerce_pair(a, b) -> tuple[Tensor | None, np.ndarray, Tensor | None, np.ndarray]:
    """Return (tensor-or-None, array) for both operands with matching dtypes."""
    ta = a if isinstance(a, Tensor) else None
    tb = b if isinstance(b, Tensor) else None
    if ta is None and tb is None:
        raise ShapeError("binary op needs at least one Tensor operand")
    if ta is not None and tb is not None:
        if ta.dtype != tb.dtype:
            raise ShapeError(f"dtype mismatch: {ta.dtype} vs {tb.dtype}")
        return ta, ta.data, tb, tb.data
    if ta is not None:
        return ta, ta.data, None, np.asarray(b, dtype=ta.dtype)
    return None, np.asarray(a, dtype=tb.dtype), tb, tb.data


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return np.asarray(g, order="C")


def _inputs_of(*pairs) -> tuple[Tensor, ...]:
    return tuple(t for t in pairs if t is not None)


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b) -> Tensor:
    ta, da, tb, db = _coerce_pair(a, b)
    out = da + db

    def rule(g):
        ga = _unbroadcast(g, da.shape) if ta is not None else None
        gb = _unbroadcast(g, db.shape) if tb is not None else None
        return [x for x in (ga, gb) if x is not None] if None in (ta, tb) else (ga, gb)

    return apply_op("add", out, _inputs_of(ta, tb), rule)


def sub(a, b) -> Tensor:
    ta, da, tb, db = _coerce_pair(a, b)
    out = da - db

    def rule(g):
        ga = _unbroadcast(g, da.shape) if ta is not None else None
        gb = _unbroadcast(-g, db.shape) if tb is not None else None
        return [x for x in (ga, gb) if x is not None] if None in (ta, tb) else (ga, gb)

    return apply_op("sub", out, _inputs_of(ta, tb), rule)


def mul(a, b) -> Tensor:
    ta, da, tb, db = _coerce_pair(a, b)
    out = da * db

    def rule(g):
        ga = _unbroadcast(g * db, da.shape) if ta is not None else None
        gb = _unbroadcast(g * da, db.shape) if tb is not None else None
        return [x for x in (ga, gb) if x is not None] if None in (ta, tb) else (ga, gb)

    return apply_op("mul", out, _inputs_of(ta, tb), rule)


def div(a, b) -> Tensor:
    ta, da, tb, db = _coerce_pair(a, b)
    out = da / db

    def rule(g):
        ga = _unbroadcast(g / db, da.shape) if ta is not None else None
        gb = _unbroadcast(-g * da / (db * db), db.shape) if tb is not None else None
        return [x for x in (ga, gb) if x is not None] if None in (ta, tb) else (ga, gb)

    return apply_op("div", out, _inputs_of(ta, tb), rule)


def exp(t: Tensor) -> Tensor:
    out = np.exp(t.data)
    return apply_op("exp", out, (t,), lambda g: (g * out,))


def log(t: Tensor) -> Tensor:
    if np.any(t.data <= 0):
        raise NumericError("log of non-positive value")
    out = np.log(t.data)
    return apply_op("log", out, (t,), lambda g: (g / t.data,))


def relu(t: Tensor) -> Tensor:
    out = np.maximum(t.data, 0)
    mask = t.data > 0
    return apply_op("relu", out, (t,), lambda g: (g * mask,))


def relu6(t: Tensor) -> Tensor:
    out = np.clip(t.data, 0, 6)
    mask = (t.data > 0) & (t.data < 6)
    return apply_op("relu6", out, (t,), lambda g: (g * mask,))


def sigmoid(t: Tensor) -> Tensor:
    # split by sign for overflow-free evaluation
    x = t.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return apply_op("sigmoid", out, (t,), lambda g: (g * out * (1.0 - out),))


def softmax(t: Tensor, axis: int) -> Tensor:
    z = t.data - t.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return apply_op("softmax", out, (t,), rule)


def log_softmax(t: Tensor, axis: int) -> Tensor:
    z = t.data - t.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def rule(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return apply_op("log_softmax", out, (t,), rule)


# ---------------------------------------------------------------------------
# reductions


def _axis_tuple(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axis_tuple(axis, t.ndim)
    out = t.data.sum(axis=axes, keepdims=keepdims)

    def rule(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, t.shape).astype(t.dtype, copy=True),)

    return apply_op("sum", np.asarray(out), (t,), rule)


def mean(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axis_tuple(axis, t.ndim)
    count = 1
    for a in axes:
        count *= t.shape[a]
    out = t.data.mean(axis=axes, keepdims=keepdims)

    def rule(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return ((np.broadcast_to(g, t.shape) / count).astype(t.dtype, copy=True),)

    return apply_op("mean", np.asarray(out), (t,), rule)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        raise ShapeError("matmul requires Tensor operands")
    if a.dtype != b.dtype:
        raise ShapeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    if a.ndim < 2 or b.ndim < 2 or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dims must match: {a.shape} vs {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} vs {b.shape}")
    out = np.matmul(a.data, b.data)
    if macs_counter.active:
        batch = 1
        for s in a.shape[:-2]:
            batch *= s
        macs_counter.add(batch * a.shape[-2] * a.shape[-1] * b.shape[-1])

    def rule(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return apply_op("matmul", out, (a, b), rule)


# ---------------------------------------------------------------------------
# shape ops


def reshape(t: Tensor, *shape) -> Tensor:
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    out = t.data.reshape(shape)
    src = t.shape
    return apply_op("reshape", out, (t,), lambda g: (np.ascontiguousarray(g.reshape(src)),))


def permute(t: Tensor, *axes) -> Tensor:
    if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    if sorted(axes) != list(range(t.ndim)):
        raise ShapeError(f"permute axes {axes} invalid for ndim {t.ndim}")
    inv = np.argsort(axes)
    out = np.ascontiguousarray(t.data.transpose(axes))
    return apply_op("permute", out, (t,),
                    lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def concat(tensors: Iterable[Tensor], axis: int) -> Tensor:
    ts = list(tensors)
    if not ts:
        raise ShapeError("concat of zero tensors")
    if any(t.dtype != ts[0].dtype for t in ts):
        raise ShapeError("concat dtype mismatch")
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def rule(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return apply_op("concat", out, tuple(ts), rule)


def slice_(t: Tensor, key) -> Tensor:
    out = t.data[key]

    def rule(g):
        gx = np.zeros_like(t.data)
        gx[key] = g
        return (gx,)

    return apply_op("slice", np.ascontiguousarray(out), (t,), rule)


def pad(t: Tensor, pad_width) -> Tensor:
    """Zero-pad; `pad_width` follows numpy's ((before, after), ...) layout."""
    pw = tuple((int(b), int(a)) for b, a in pad_width)
    if len(pw) != t.ndim:
        raise ShapeError(f"pad_width rank {len(pw)} != tensor rank {t.ndim}")
    out = np.pad(t.data, pw)
    key = tuple(slice(b, b + s) for (b, _), s in zip(pw, t.shape))
    return apply_op("pad", out, (t,), lambda g: (np.ascontiguousarray(g[key]),))


def flip(t: Tensor, axes) -> Tensor:
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(axes)
    out = np.ascontiguousarray(np.flip(t.data, axis=axes))
    return apply_op("flip", out, (t,),
                    lambda g: (np.ascontiguousarray(np.flip(g, axis=axes)),))


def embedding_lookup(table: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows of `table` by an integer index array (constant indices)."""
    idx = np.asarray(index)
    out = table.data[idx]

    def rule(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return apply_op("embedding_lookup", np.ascontiguousarray(out), (table,), rule)
