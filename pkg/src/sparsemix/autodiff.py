"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Execution model: while a :class:`Tape` is active (as a context manager),
every primitive records one node holding the op tag, input/output slots and
a backward closure. ``Tape.backward`` replays the node list in exact reverse
insertion order, which is a reverse topological order by construction, so
gradient accumulation order is fixed and two runs on identical inputs yield
bit-identical gradients.

Matrix products accumulate over the contraction index in a fixed order (one
rank-1 update per index) rather than calling into BLAS. This keeps results
bit-identical to a sequential triple-loop reference and independent of the
host's BLAS build; at the tensor sizes this package targets the cost is
irrelevant.

Tapes are tracked per thread. Distinct tapes may be driven from distinct
threads; a single tape must not be shared.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NumericError, ShapeError, UnsupportedOp

Array = np.ndarray

_tls = threading.local()


def _tape_stack() -> list:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def _active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense row-major float64 array with an optional gradient buffer.

    Construction validates finiteness; intermediate op outputs skip the check
    (non-finite propagation is surfaced by :meth:`validate` at module
    boundaries). ``const`` marks tensors that never need gradients, e.g.
    retention masks and training targets.
    """

    __slots__ = ("data", "grad", "const")

    def __init__(self, values, *, const: bool = False):
        arr = np.ascontiguousarray(np.asarray(values, dtype=np.float64))
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor values must be finite")
        self.data: Array = arr
        self.grad: Array | None = None
        self.const = const

    @classmethod
    def _wrap(cls, arr: Array, const: bool = False) -> "Tensor":
        out = cls.__new__(cls)
        out.data = arr
        out.grad = None
        out.const = const
        return out

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ShapeError(f"item() requires a scalar tensor, got shape {self.shape}")

    def validate(self) -> "Tensor":
        """Surface non-finite values produced during compute."""
        if not np.all(np.isfinite(self.data)):
            raise NumericError("non-finite values encountered during compute")
        return self

    def copy(self) -> "Tensor":
        return Tensor._wrap(self.data.copy(), const=self.const)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, const={self.const})"

    # Operator sugar; scalars route through scale/shift so they never
    # allocate constant tensors.
    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return shift(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return shift(self, -float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


def constant(values) -> Tensor:
    """Tensor that participates in forward compute but receives no gradient."""
    return Tensor(values, const=True)


@dataclass
class Node:
    op: str
    input_ids: tuple[int, ...]
    output_id: int
    backward: Callable[[Array], tuple[Array | None, ...]] | None


class Tape:
    """Topologically ordered record of primitive applications."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._slots: dict[int, int] = {}
        self._tensors: list[Tensor] = []
        self._produced: set[int] = set()
        self.matmul_macs: int = 0

    def _slot(self, t: Tensor) -> int:
        key = id(t)
        slot = self._slots.get(key)
        if slot is None:
            slot = len(self._tensors)
            self._slots[key] = slot
            self._tensors.append(t)
        return slot

    def record(
        self,
        op: str,
        inputs: Sequence[Tensor],
        output: Tensor,
        backward: Callable[[Array], tuple[Array | None, ...]] | None,
    ) -> None:
        in_slots = tuple(self._slot(t) for t in inputs)
        self.nodes.append(Node(op, in_slots, self._slot(output), backward))
        self._produced.add(self._slots[id(output)])

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _tape_stack().pop()
        assert popped is self, "tape stack corrupted"

    def backward(self, loss: Tensor) -> dict[Tensor, Array]:
        """Reverse sweep from a scalar loss.

        Returns gradients for every non-const leaf (tensors consumed but
        never produced on this tape) and stores them on ``leaf.grad``.
        Leaves that never reach the loss get explicit zeros.
        """
        if loss.shape != ():
            raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
        slot = self._slots.get(id(loss))
        if slot is None or slot not in self._produced:
            raise ShapeError("loss was not produced on this graph")
        grads: dict[int, Array] = {slot: np.ones((), dtype=np.float64)}
        for node in reversed(self.nodes):
            g_out = grads.get(node.output_id)
            if g_out is None:
                continue
            if node.backward is None:
                raise UnsupportedOp(f"no backward rule registered for op '{node.op}'")
            for s, g in zip(node.input_ids, node.backward(g_out)):
                if g is None:
                    continue
                held = grads.get(s)
                grads[s] = g if held is None else held + g
        result: dict[Tensor, Array] = {}
        for slot, t in enumerate(self._tensors):
            if slot in self._produced or t.const:
                continue
            g = grads.get(slot)
            if g is None:
                g = np.zeros_like(t.data)
            else:
                g = np.ascontiguousarray(np.broadcast_to(g, t.data.shape))
            t.grad = g
            result[t] = g
        return result


def _record(op, inputs, output, backward) -> None:
    tape = _active_tape()
    if tape is not None:
        tape.record(op, inputs, output, backward)


def _sum_to_shape(g: Array, shape: tuple[int, ...]) -> Array:
    """Reduce a broadcast gradient back to the source shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from exc


try:  # numba only accelerates; the numpy fallback is bit-identical
    import numba

    @numba.njit(cache=True)
    def _mm3d(a, b, out):  # pragma: no cover - exercised via _matmul_seq
        for s in range(a.shape[0]):
            for i in range(a.shape[1]):
                for j in range(b.shape[2]):
                    out[s, i, j] = 0.0
                for k in range(a.shape[2]):
                    aik = a[s, i, k]
                    for j in range(b.shape[2]):
                        out[s, i, j] += aik * b[s, k, j]

    @numba.njit(cache=True)
    def _mm3d_shared(a, b, out):  # pragma: no cover - exercised via _matmul_seq
        for s in range(a.shape[0]):
            for i in range(a.shape[1]):
                for j in range(b.shape[1]):
                    out[s, i, j] = 0.0
                for k in range(a.shape[2]):
                    aik = a[s, i, k]
                    for j in range(b.shape[1]):
                        out[s, i, j] += aik * b[k, j]

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    _HAVE_NUMBA = False


def _matmul_seq(a: Array, b: Array) -> Array:
    """Matrix product accumulated in fixed contraction order.

    Per output element the accumulation sequence is identical to
    ``for k: c[i, j] += a[i, k] * b[k, j]`` (one rounding per add, no FMA
    contraction), so results match a sequential triple-loop reference
    bit-for-bit regardless of the execution path taken below.
    """
    batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    n, k, m = a.shape[-2], a.shape[-1], b.shape[-1]
    if _HAVE_NUMBA:
        nbatch = int(np.prod(batch, dtype=np.int64)) if batch else 1
        out = np.empty(batch + (n, m), dtype=np.float64)
        out3 = out.reshape(nbatch, n, m)
        if b.ndim == 2:
            a3 = np.ascontiguousarray(np.broadcast_to(a, batch + (n, k))).reshape(nbatch, n, k)
            _mm3d_shared(a3, np.ascontiguousarray(b), out3)
        else:
            a3 = np.ascontiguousarray(np.broadcast_to(a, batch + (n, k))).reshape(nbatch, n, k)
            b3 = np.ascontiguousarray(np.broadcast_to(b, batch + (k, m))).reshape(nbatch, k, m)
            _mm3d(a3, b3, out3)
        return out
    out = np.zeros(batch + (n, m), dtype=np.float64)
    tmp = np.empty_like(out)
    for kk in range(k):
        np.multiply(a[..., :, kk : kk + 1], b[..., kk : kk + 1, :], out=tmp)
        out += tmp
    return out


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul requires tensors with at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise ShapeError(f"matmul: batch dims {a.shape[:-2]} / {b.shape[:-2]}") from exc
    out = Tensor._wrap(_matmul_seq(a.data, b.data))
    tape = _active_tape()
    if tape is not None:
        n, k, m = a.shape[-2], a.shape[-1], b.shape[-1]
        tape.matmul_macs += int(np.prod(batch, dtype=np.int64)) * n * k * m
        ad, bd = a.data, b.data
        asha, bshb = a.shape, b.shape
        na, nb = not a.const, not b.const

        def backward(dy: Array):
            ga = _sum_to_shape(_matmul_seq(dy, np.swapaxes(bd, -1, -2)), asha) if na else None
            gb = _sum_to_shape(_matmul_seq(np.swapaxes(ad, -1, -2), dy), bshb) if nb else None
            return ga, gb

        tape.record("matmul", (a, b), out, backward)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    out = Tensor._wrap(a.data + b.data)
    asha, bshb = a.shape, b.shape
    na, nb = not a.const, not b.const

    def backward(dy: Array):
        return (
            _sum_to_shape(dy, asha) if na else None,
            _sum_to_shape(dy, bshb) if nb else None,
        )

    _record("add", (a, b), out, backward)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    out = Tensor._wrap(a.data - b.data)
    asha, bshb = a.shape, b.shape
    na, nb = not a.const, not b.const

    def backward(dy: Array):
        return (
            _sum_to_shape(dy, asha) if na else None,
            _sum_to_shape(-dy, bshb) if nb else None,
        )

    _record("sub", (a, b), out, backward)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    out = Tensor._wrap(a.data * b.data)
    ad, bd = a.data, b.data
    asha, bshb = a.shape, b.shape
    na, nb = not a.const, not b.const

    def backward(dy: Array):
        return (
            _sum_to_shape(dy * bd, asha) if na else None,
            _sum_to_shape(dy * ad, bshb) if nb else None,
        )

    _record("mul", (a, b), out, backward)
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor._wrap(-a.data)
    _record("neg", (a,), out, lambda dy: (-dy,))
    return out


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor._wrap(a.data * c)
    _record("scale", (a,), out, lambda dy: (dy * c,))
    return out


def shift(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor._wrap(a.data + c)
    _record("shift", (a,), out, lambda dy: (dy,))
    return out


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0.0  # subgradient 0 at exactly 0
    out = Tensor._wrap(np.where(keep, a.data, 0.0))
    _record("relu", (a,), out, lambda dy: (dy * keep,))
    return out


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = Tensor._wrap(y)
    _record("tanh", (a,), out, lambda dy: (dy * (1.0 - y * y),))
    return out


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = Tensor._wrap(np.log(a.data))
    ad = a.data
    _record("log", (a,), out, lambda dy: (dy / ad,))
    return out


def softmax_lastdim(a: Tensor) -> Tensor:
    """Stable softmax over the last axis; rows sum to 1 and stay positive."""
    x = a.data
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor._wrap(y)

    def backward(dy: Array):
        inner = (dy * y).sum(axis=-1, keepdims=True)
        return ((dy - inner) * y,)

    _record("softmax_lastdim", (a,), out, backward)
    return out


def log_softmax_lastdim(a: Tensor) -> Tensor:
    x = a.data
    z = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    out = Tensor._wrap(y)
    p = np.exp(y)

    def backward(dy: Array):
        return (dy - p * dy.sum(axis=-1, keepdims=True),)

    _record("log_softmax_lastdim", (a,), out, backward)
    return out


def layer_norm(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize the last axis to mean 0 / variance 1; affine is external."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor._wrap(xhat)

    def backward(dy: Array):
        m1 = dy.mean(axis=-1, keepdims=True)
        m2 = (dy * xhat).mean(axis=-1, keepdims=True)
        return (inv * (dy - m1 - xhat * m2),)

    _record("layer_norm", (a,), out, backward)
    return out


def mean_over_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"mean_over_axis: axis {axis} out of range for shape {a.shape}")
    axis = axis % a.ndim
    out = Tensor._wrap(a.data.mean(axis=axis, keepdims=keepdims))
    n = a.shape[axis]
    asha = a.shape

    def backward(dy: Array):
        g = dy if keepdims else np.expand_dims(dy, axis)
        return (np.broadcast_to(g / n, asha).copy(),)

    _record("mean_over_axis", (a,), out, backward)
    return out


def sum_over_axis(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    if axis is None:
        out = Tensor._wrap(np.asarray(a.data.sum()))
        asha = a.shape
        _record("sum_over_axis", (a,), out, lambda dy: (np.broadcast_to(dy, asha).copy(),))
        return out
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"sum_over_axis: axis {axis} out of range for shape {a.shape}")
    axis = axis % a.ndim
    out = Tensor._wrap(a.data.sum(axis=axis, keepdims=keepdims))
    asha = a.shape

    def backward(dy: Array):
        g = dy if keepdims else np.expand_dims(dy, axis)
        return (np.broadcast_to(g, asha).copy(),)

    _record("sum_over_axis", (a,), out, backward)
    return out


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    out = Tensor._wrap(np.ascontiguousarray(a.data.transpose(axes)))
    inverse = tuple(np.argsort(axes))
    _record("transpose", (a,), out, lambda dy: (np.ascontiguousarray(dy.transpose(inverse)),))
    return out


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = Tensor._wrap(np.ascontiguousarray(a.data).reshape(shape))
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from exc
    asha = a.shape
    _record("reshape", (a,), out, lambda dy: (np.ascontiguousarray(dy).reshape(asha),))
    return out


def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = Tensor._wrap(np.broadcast_to(a.data, shape).copy())
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: {a.shape} -> {shape}") from exc
    asha = a.shape
    _record("broadcast_to", (a,), out, lambda dy: (_sum_to_shape(dy, asha),))
    return out


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat requires at least one tensor")
    ndim = tensors[0].ndim
    if not -ndim <= axis < ndim:
        raise ShapeError(f"concat: axis {axis} out of range")
    axis = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim:
            raise ShapeError("concat: rank mismatch")
        for d in range(ndim):
            if d != axis and t.shape[d] != tensors[0].shape[d]:
                raise ShapeError(f"concat: shapes {[t.shape for t in tensors]} disagree off-axis")
    out = Tensor._wrap(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    needs = [not t.const for t in tensors]

    def backward(dy: Array):
        pieces = np.split(dy, splits, axis=axis)
        return tuple(
            np.ascontiguousarray(p) if need else None for p, need in zip(pieces, needs)
        )

    _record("concat", tuple(tensors), out, backward)
    return out


def index_axis(a: Tensor, axis: int, index: int) -> Tensor:
    """Select one index along an axis, dropping that axis."""
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"index_axis: axis {axis} out of range for shape {a.shape}")
    axis = axis % a.ndim
    if not 0 <= index < a.shape[axis]:
        raise ShapeError(f"index_axis: index {index} out of range on axis {axis}")
    out = Tensor._wrap(np.ascontiguousarray(np.take(a.data, index, axis=axis)))
    asha = a.shape

    def backward(dy: Array):
        g = np.zeros(asha, dtype=np.float64)
        sl = [slice(None)] * len(asha)
        sl[axis] = index
        g[tuple(sl)] = dy
        return (g,)

    _record("index_axis", (a,), out, backward)
    return out


_REGISTRY: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "neg": neg,
    "scale": scale,
    "shift": shift,
    "relu": relu,
    "tanh": tanh,
    "log": log,
    "softmax_lastdim": softmax_lastdim,
    "log_softmax_lastdim": log_softmax_lastdim,
    "layer_norm": layer_norm,
    "mean_over_axis": mean_over_axis,
    "sum_over_axis": sum_over_axis,
    "transpose": transpose,
    "reshape": reshape,
    "broadcast_to": broadcast_to,
    "concat": concat,
    "index_axis": index_axis,
}


def apply_primitive(op: str, *inputs, **params) -> Tensor:
    """Dispatch a primitive by name, recording it on the active tape."""
    fn = _REGISTRY.get(op)
    if fn is None:
        raise UnsupportedOp(f"unknown primitive '{op}'")
    return fn(*inputs, **params)


def register_primitive(op: str, fn: Callable) -> None:
    """Add a primitive to the dispatch table (overwrites are rejected)."""
    if op in _REGISTRY:
        raise UnsupportedOp(f"primitive '{op}' already registered")
    _REGISTRY[op] = fn


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """Per-parameter Adam moments plus the shared step counter."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    t: int = 0
    m: dict[str, Array] = field(default_factory=dict)
    v: dict[str, Array] = field(default_factory=dict)


def adam_init(
    params: dict[str, Tensor],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.99,
    eps: float = 1e-8,
) -> AdamState:
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
    for name in sorted(params):
        state.m[name] = np.zeros_like(params[name].data)
        state.v[name] = np.zeros_like(params[name].data)
    return state


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, Array],
    state: AdamState,
) -> dict[str, Tensor]:
    """Bias-corrected Adam update, applied in place in sorted-name order.

    Parameters absent from ``grads`` are treated as zero-gradient (their
    moments still decay, matching a gradient that is exactly zero).
    """
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    for name in sorted(params):
        p = params[name]
        if name not in state.m:
            raise ShapeError(f"adam_step: no state for parameter '{name}'")
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeError(f"adam_step: gradient shape {g.shape} != param {p.data.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


# ---------------------------------------------------------------------------
# gradient oracle


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Tensor | Sequence[Tensor],
    step: float,
) -> float:
    """Compare tape gradients of ``f()`` against central finite differences.

    ``f`` must be a deterministic closure over ``params`` that returns a
    scalar tensor. Returns the max over coordinates of
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    plist = [params] if isinstance(params, Tensor) else list(params)
    with Tape() as tape:
        loss = f()
        if loss.shape != ():
            raise ShapeError("f must return a scalar tensor")
        if not np.isfinite(loss.data):
            raise NumericError("f returned a non-finite value")
        grads = tape.backward(loss)

    def eval_loss() -> float:
        value = f().item()
        if not np.isfinite(value):
            raise NumericError("f returned a non-finite value")
        return value

    worst = 0.0
    for p in plist:
        analytic = grads.get(p, np.zeros_like(p.data))
        flat = p.data.reshape(-1)
        aflat = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = eval_loss()
            flat[i] = orig - step
            lo = eval_loss()
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * step)
            err = abs(aflat[i] - numeric) / max(1.0, abs(aflat[i]))
            if err > worst:
                worst = err
    return worst
