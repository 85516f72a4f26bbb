"""Reverse-mode automatic differentiation over dense float64 tensors.

A dynamic tape is rebuilt on every forward pass: each op produces a new
`Tensor` that remembers its parents, a vector-Jacobian closure, and a
monotonically increasing creation index. Creation order is a topological
order by construction, so `backward` simply walks reachable nodes in
reverse creation order, which makes repeated backward passes bit-identical.

All vjp closures are themselves written in terms of the primitives below,
so gradients are ordinary graph tensors and can be differentiated again
(needed to backpropagate through a virtual one-step parameter update).
"""

from __future__ import annotations

import itertools
import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import InputError, NonFiniteError, ShapeError, UsageError

Array = np.ndarray

LOG_FLOOR = 1e-12  # probabilities are clamped here before any log

_counter = itertools.count()
_finite_checks = True


class _TapeState(threading.local):
    # per-thread recording flag: independent training contexts on separate
    # threads never observe each other's no_grad scopes
    def __init__(self):
        self.grad_enabled = True


_state = _TapeState()


def set_finite_checks(enabled: bool) -> None:
    """Toggle the NaN/Inf guard applied to every op result (default on)."""
    global _finite_checks
    _finite_checks = enabled


@contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextmanager
def _recording(enabled: bool):
    prev = _state.grad_enabled
    _state.grad_enabled = enabled
    try:
        yield
    finally:
        _state.grad_enabled = prev


def _all_finite(arr: np.ndarray) -> bool:
    # a single fused reduction; NaN/Inf anywhere poisons the sum
    return math.isfinite(arr.sum())


class Tensor:
    """N-dimensional float64 value, optionally participating in gradients."""

    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "_vjp", "idx")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if _finite_checks and not _all_finite(arr):
            raise NonFiniteError("tensor holds non-finite values")
        self.data: Array = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None
        self.op: str | None = None
        self.parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[Tensor], tuple] | None = None
        self.idx: int = next(_counter)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def copy(self) -> "Tensor":
        out = Tensor(self.data.copy(), requires_grad=self.requires_grad)
        return out

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # light operator sugar; the functional API below is primary
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    """Leaf tensor that receives gradients."""
    return Tensor(data, requires_grad=True)


def _make(data: Array, op: str, parents: Sequence[Tensor],
          vjp: Callable[[Tensor], tuple]) -> Tensor:
    track = _state.grad_enabled and any(p.requires_grad for p in parents)
    if _finite_checks and not _all_finite(data):
        raise NonFiniteError(f"op '{op}' produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = track
    out.grad = None
    out.op = op if track else None
    out.parents = tuple(parents) if track else ()
    out._vjp = vjp if track else None
    out.idx = next(_counter)
    return out


def _require_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _require_same_shape(a, b, "add")
    return _make(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _require_same_shape(a, b, "sub")
    return _make(a.data - b.data, "sub", (a, b), lambda g: (g, scale(g, -1.0)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _require_same_shape(a, b, "mul")
    return _make(a.data * b.data, "mul", (a, b),
                 lambda g: (mul(g, b), mul(g, a)))


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, "scale", (a,), lambda g: (scale(g, c),))


def add_scalar(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data + float(c), "add_scalar", (a,), lambda g: (g,))


def power(a: Tensor, p: float) -> Tensor:
    """Elementwise a**p. For non-integer p the input must be positive."""
    a = as_tensor(a)
    p = float(p)
    return _make(a.data ** p, "power", (a,),
                 lambda g: (mul(g, scale(power(a, p - 1.0), p)),))


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = _make(np.exp(a.data), "exp", (a,), None)
    out._vjp = lambda g: (mul(g, out),)
    return out


def log(a: Tensor) -> Tensor:
    """Natural log; inputs must be strictly positive (see safe_log)."""
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise InputError("log: non-positive input; clamp first (safe_log)")
    return _make(np.log(a.data), "log", (a,),
                 lambda g: (mul(g, power(a, -1.0)),))


def clamp_min(a: Tensor, floor: float) -> Tensor:
    a = as_tensor(a)
    floor = float(floor)
    mask = Tensor((a.data > floor).astype(np.float64))
    return _make(np.maximum(a.data, floor), "clamp_min", (a,),
                 lambda g: (mul(g, mask),))


def safe_log(a: Tensor) -> Tensor:
    """log with probabilities clamped to >= 1e-12 first."""
    return log(clamp_min(a, LOG_FLOOR))


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    mask = Tensor((a.data > 0.0).astype(np.float64))
    return _make(np.maximum(a.data, 0.0), "relu", (a,),
                 lambda g: (mul(g, mask),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; 2-D, or 3-D with matching leading batch dimension."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim != bd.ndim or ad.ndim not in (2, 3):
        raise ShapeError(f"matmul: unsupported ranks {ad.ndim} and {bd.ndim}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: inner dims {ad.shape} x {bd.shape} differ")
    if ad.ndim == 3 and ad.shape[0] != bd.shape[0]:
        raise ShapeError(f"matmul: batch dims {ad.shape[0]} != {bd.shape[0]}")
    return _make(np.matmul(ad, bd), "matmul", (a, b),
                 lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g)))


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    nd = a.data.ndim
    if nd < 2:
        raise ShapeError("transpose: needs at least 2 dims")
    axes = tuple(range(nd - 2)) + (nd - 1, nd - 2)
    return _make(np.transpose(a.data, axes), "transpose",
                 (a,), lambda g: (transpose(g),))


def permute(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeError(f"permute: {axes} is not a permutation of {a.data.ndim} axes")
    inv = tuple(int(i) for i in np.argsort(axes))
    return _make(np.transpose(a.data, axes), "permute",
                 (a,), lambda g: (permute(g, inv),))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    old = a.data.shape
    return _make(a.data.reshape(shape), "reshape", (a,),
                 lambda g: (reshape(g, old),))


def tensor_sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.data.shape

    def vjp(g: Tensor):
        if axis is None:
            return (broadcast_to(reshape(g, (1,) * len(shape)), shape),)
        g2 = g if keepdims else reshape(g, _keepdims_shape(shape, axis))
        return (broadcast_to(g2, shape),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), "sum", (a,), vjp)


def _keepdims_shape(shape: tuple[int, ...], axis: int) -> tuple[int, ...]:
    axis = axis % len(shape)
    return shape[:axis] + (1,) + shape[axis + 1:]


def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    old = a.data.shape
    try:
        # materialize: downstream elementwise ops degrade on 0-stride views
        data = np.ascontiguousarray(np.broadcast_to(a.data, shape))
    except ValueError as e:
        raise ShapeError(f"broadcast_to: {old} -> {shape}") from e

    def vjp(g: Tensor):
        return (_sum_to(g, old),)

    return _make(data, "broadcast", (a,), vjp)


def _sum_to(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Reduce g back to `shape` by summing broadcast axes."""
    while g.ndim > len(shape):
        g = tensor_sum(g, axis=0)
    for ax, n in enumerate(shape):
        if g.shape[ax] != n:
            g = tensor_sum(g, axis=ax, keepdims=True)
    return g if g.shape == shape else reshape(g, shape)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: empty input list")
    axis = axis % ts[0].ndim
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g: Tensor):
        return tuple(narrow(g, axis, int(offsets[i]), sizes[i])
                     for i in range(len(ts)))

    return _make(np.concatenate([t.data for t in ts], axis=axis), "concat",
                 ts, vjp)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    a = as_tensor(a)
    axis = axis % a.ndim
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError(f"narrow: [{start}:{start + length}) out of {a.shape[axis]}")
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, start + length)
    full = a.shape

    def vjp(g: Tensor):
        return (pad_slice(g, axis, start, full),)

    return _make(a.data[tuple(index)], "narrow", (a,), vjp)


def slice_row(a: Tensor, i: int) -> Tensor:
    """Row i of a as shape [1, ...]."""
    return narrow(a, 0, i, 1)


def pad_slice(a: Tensor, axis: int, start: int, shape: tuple[int, ...]) -> Tensor:
    """Embed a into zeros of `shape` at offset `start` along `axis`."""
    a = as_tensor(a)
    axis = axis % len(shape)
    data = np.zeros(shape, dtype=np.float64)
    index = [slice(None)] * len(shape)
    index[axis] = slice(start, start + a.shape[axis])
    data[tuple(index)] = a.data
    length = a.shape[axis]

    def vjp(g: Tensor):
        return (narrow(g, axis, start, length),)

    return _make(data, "pad_slice", (a,), vjp)


def embedding_lookup(table: Tensor, ids: Array) -> Tensor:
    """Gather rows of table by an integer id array; output shape ids.shape + [d]."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise InputError("embedding_lookup: ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise InputError("embedding_lookup: id out of range")

    def vjp(g: Tensor):
        return (scatter_add_rows(g, ids, table.shape),)

    return _make(table.data[ids], "embedding_lookup", (table,), vjp)


def scatter_add_rows(g: Tensor, ids: Array, shape: tuple[int, ...]) -> Tensor:
    """Adjoint of embedding_lookup: sum rows of g into zeros[shape] at ids."""
    g = as_tensor(g)
    ids = np.asarray(ids)
    data = np.zeros(shape, dtype=np.float64)
    np.add.at(data, ids.reshape(-1), g.data.reshape(-1, shape[-1]))

    def vjp(gg: Tensor):
        return (embedding_lookup(gg, ids),)

    return _make(data, "scatter_add_rows", (g,), vjp)


def gather_positions(x: Tensor, positions: Array) -> Tensor:
    """Pick x[i, positions[i]] per leading row; [b, s, d] -> [b, d]."""
    x = as_tensor(x)
    pos = np.asarray(positions)
    b = x.shape[0]
    if pos.shape != (b,):
        raise ShapeError(f"gather_positions: need {b} positions, got {pos.shape}")
    if pos.size and (pos.min() < 0 or pos.max() >= x.shape[1]):
        raise InputError("gather_positions: position out of range")
    rows = np.arange(b)
    full = x.shape

    def vjp(g: Tensor):
        return (scatter_positions(g, pos, full),)

    return _make(x.data[rows, pos], "gather_positions", (x,), vjp)


def scatter_positions(g: Tensor, positions: Array, shape: tuple[int, ...]) -> Tensor:
    g = as_tensor(g)
    pos = np.asarray(positions)
    data = np.zeros(shape, dtype=np.float64)
    data[np.arange(shape[0]), pos] = g.data

    def vjp(gg: Tensor):
        return (gather_positions(gg, pos),)

    return _make(data, "scatter_positions", (g,), vjp)


def gather_cols(x: Tensor, ids: Array) -> Tensor:
    """Select columns of a 2-D tensor: [b, n] -> [b, len(ids)]."""
    x = as_tensor(x)
    ids = np.asarray(ids)
    if x.ndim != 2:
        raise ShapeError("gather_cols: input must be 2-D")
    if ids.size and (ids.min() < 0 or ids.max() >= x.shape[1]):
        raise InputError("gather_cols: column id out of range")
    full = x.shape

    def vjp(g: Tensor):
        return (scatter_cols(g, ids, full),)

    return _make(x.data[:, ids], "gather_cols", (x,), vjp)


def scatter_cols(g: Tensor, ids: Array, shape: tuple[int, ...]) -> Tensor:
    g = as_tensor(g)
    ids = np.asarray(ids)
    data = np.zeros(shape, dtype=np.float64)
    np.add.at(data, (slice(None), ids), g.data)

    def vjp(gg: Tensor):
        return (gather_cols(gg, ids),)

    return _make(data, "scatter_cols", (g,), vjp)


def stop_gradient(a: Tensor) -> Tensor:
    return Tensor(as_tensor(a).data)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along `axis`.

    The max is subtracted before exponentiation, and the denominator sums
    the exponentials in sorted order so the output is bit-identical under
    any permutation of the input slice.
    """
    x = as_tensor(x)
    axis = axis % x.ndim if x.ndim else 0
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError("softmax: empty axis")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    denom = np.sum(np.sort(e, axis=axis), axis=axis, keepdims=True)
    out = _make(e / denom, "softmax", (x,), None)

    def vjp(g: Tensor):
        gy = mul(g, out)
        s = tensor_sum(gy, axis=axis, keepdims=True)
        return (sub(gy, mul(out, broadcast_to(s, out.shape))),)

    out._vjp = vjp
    return out


# ---------------------------------------------------------------------------
# composites


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis % a.ndim]
    return scale(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    axis = axis % x.ndim
    shift = Tensor(np.broadcast_to(np.max(x.data, axis=axis, keepdims=True),
                                   x.shape).copy())
    z = sub(x, shift)
    lse = log(tensor_sum(exp(z), axis=axis, keepdims=True))
    return sub(z, broadcast_to(lse, x.shape))


def cross_entropy_rows(logits: Tensor, targets: Tensor) -> Tensor:
    """Per-example cross entropy against soft target rows; [b, n] -> [b]."""
    logits, targets = as_tensor(logits), as_tensor(targets)
    _require_same_shape(logits, targets, "cross_entropy")
    if np.any(targets.data < 0.0):
        raise InputError("cross_entropy: negative target entry")
    if np.any(np.abs(targets.data.sum(axis=-1) - 1.0) > 1e-9):
        raise InputError("cross_entropy: target rows must sum to 1")
    return scale(tensor_sum(mul(targets, log_softmax(logits, axis=-1)),
                            axis=-1), -1.0)


def cross_entropy(logits: Tensor, targets: Tensor) -> Tensor:
    """Batch-mean cross entropy with soft targets."""
    return mean(cross_entropy_rows(logits, targets))


def kl_divergence(p: Tensor, q: Tensor, axis: int = -1) -> Tensor:
    """KL(p || q) = sum p * (log p - log q) along `axis`, clamped logs."""
    p, q = as_tensor(p), as_tensor(q)
    _require_same_shape(p, q, "kl_divergence")
    return tensor_sum(mul(p, sub(safe_log(p), safe_log(q))), axis=axis)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply elementwise gain and bias."""
    x = as_tensor(x)
    d = x.shape[-1]
    mu = mean(x, axis=-1, keepdims=True)
    centered = sub(x, broadcast_to(mu, x.shape))
    var = mean(mul(centered, centered), axis=-1, keepdims=True)
    inv = power(add_scalar(var, eps), -0.5)
    normed = mul(centered, broadcast_to(inv, x.shape))
    g = broadcast_to(reshape(gain, (1,) * (x.ndim - 1) + (d,)), x.shape)
    b = broadcast_to(reshape(bias, (1,) * (x.ndim - 1) + (d,)), x.shape)
    return add(mul(normed, g), b)


# ---------------------------------------------------------------------------
# backward


def topo_order(root: Tensor) -> list[Tensor]:
    """Reachable recorded nodes sorted by creation index (a topological order)."""
    seen: set[int] = set()
    out: list[Tensor] = []
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        out.append(t)
        stack.extend(t.parents)
    out.sort(key=lambda t: t.idx)
    return out


def grad(loss: Tensor, sources: Iterable[Tensor],
         create_graph: bool = False) -> list[Tensor]:
    """Gradients of a scalar loss for each source tensor.

    With create_graph=True the returned tensors stay on the tape, so they
    can participate in further differentiable computation.
    """
    sources = list(sources)
    if loss.size != 1:
        raise UsageError("grad: loss must be scalar")
    accum: dict[int, Tensor] = {}
    with _recording(create_graph):
        accum[id(loss)] = Tensor(np.ones_like(loss.data))
        if loss.requires_grad:
            for node in reversed(topo_order(loss)):
                g = accum.get(id(node))
                if g is None or node._vjp is None:
                    continue
                parent_grads = node._vjp(g)
                for p, pg in zip(node.parents, parent_grads):
                    if pg is None or not p.requires_grad:
                        continue
                    held = accum.get(id(p))
                    accum[id(p)] = pg if held is None else add(held, pg)
        out = []
        for s in sources:
            held = accum.get(id(s))
            out.append(held if held is not None
                       else Tensor(np.zeros_like(s.data)))
        return out


def backward(loss: Tensor) -> dict[Tensor, Array]:
    """Populate .grad on every requires_grad leaf under `loss`; return the map.

    Repeated calls on the same recorded graph overwrite .grad with
    bit-identical values.
    """
    if loss.size != 1:
        raise UsageError("backward: loss must be scalar")
    leaves = [t for t in topo_order(loss) if t.requires_grad and t._vjp is None]
    grads = grad(loss, leaves, create_graph=False)
    result: dict[Tensor, Array] = {}
    for leaf, g in zip(leaves, grads):
        leaf.grad = g.data
        result[leaf] = g.data
    return result
