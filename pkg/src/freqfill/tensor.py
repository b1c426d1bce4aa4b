"""Dense float tensors with a rebuild-per-step reverse-mode gradient tape.

The tape is define-by-run: ops executed while a ``GradTape`` is active append
their backward rules in creation order, which is already a topological order,
so ``backward`` is a single reversed sweep. Without an active tape every op
is a plain numpy computation (the inference fast path).
"""

from __future__ import annotations

import math
import os
from typing import Callable, Sequence

import numpy as np

from .errors import ContractViolation, NumericFault

Array = np.ndarray

# Construction always rejects non-finite values; with debug enabled every op
# output is checked as well.
DEBUG_CHECK_FINITE = os.environ.get("HIFI_DEBUG", "0") not in ("", "0")

_ACTIVE: list["GradTape"] = []


def _check_finite(data: Array, origin: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NumericFault(f"non-finite values in {origin}")


class Tensor:
    """n-dimensional float array; float32 by default, float64 for validation runs."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        else:
            arr = np.asarray(data)
            if not (isinstance(data, np.ndarray) and arr.dtype == np.float64):
                arr = arr.astype(np.float32)
        if arr.dtype not in (np.float32, np.float64):
            raise ContractViolation(f"unsupported dtype {arr.dtype}")
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_err(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # Arithmetic sugar; scalars go through shift/scale so they stay tape-safe.
    def __add__(self, other):
        return shift(self, other) if np.isscalar(other) else add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return shift(self, -other) if np.isscalar(other) else sub(self, other)

    def __rsub__(self, other):
        return shift(scale(self, -1.0), other)

    def __mul__(self, other):
        return scale(self, other) if np.isscalar(other) else mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / other)
        raise ContractViolation("tensor/tensor division is not part of the op set")

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _scalar_err(t: Tensor):
    raise ContractViolation(f"item() needs a scalar tensor, got shape {t.shape}")


def parameter(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


def constant(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=False, dtype=dtype)


class GradTape:
    """Ordered op records plus the leaf set discovered during backward."""

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._grads: dict[int, Array] = {}
        self.leaves: list[Tensor] = []

    def __enter__(self) -> "GradTape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.pop()

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into every reachable leaf's ``.grad``."""
        if loss.data.size != 1:
            raise ContractViolation(f"backward needs a scalar loss, got shape {loss.shape}")
        self._grads = {id(loss): np.ones_like(loss.data)}
        produced = {id(out) for out, _, _ in self.nodes}
        leaves: dict[int, Tensor] = {}
        for out, inputs, bw in reversed(self.nodes):
            g = self._grads.get(id(out))
            if g is None:
                continue
            for t, gi in zip(inputs, bw(g)):
                if gi is None or not t.requires_grad:
                    continue
                if gi.shape != t.data.shape:
                    raise NumericFault("backward rule produced a mismatched gradient shape")
                acc = self._grads.get(id(t))
                self._grads[id(t)] = gi if acc is None else acc + gi
                if id(t) not in produced:
                    leaves[id(t)] = t
        for t in leaves.values():
            t.grad = self._grads[id(t)]
        self.leaves = list(leaves.values())

    def grad_of(self, t: Tensor) -> Array | None:
        """Accumulated gradient of any tensor touched by the last backward call."""
        return self._grads.get(id(t))


def _wrap(data: Array) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.grad = None
    if DEBUG_CHECK_FINITE:
        _check_finite(data, "op output")
    return out


def _record(out: Tensor, inputs: tuple[Tensor, ...], bw: Callable) -> Tensor:
    if _ACTIVE and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _ACTIVE[-1].nodes.append((out, inputs, bw))
    return out


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _conform(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractViolation(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None
    if a.dtype != b.dtype:
        raise ContractViolation(f"{op}: mixed dtypes {a.dtype} vs {b.dtype}")


# ---------------------------------------------------------------------------
# Core op set


def add(a: Tensor, b: Tensor) -> Tensor:
    _conform(a, b, "add")
    out = _wrap(a.data + b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _conform(a, b, "sub")
    out = _wrap(a.data - b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _conform(a, b, "mul")
    out = _wrap(a.data * b.data)
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    if not math.isfinite(s):
        raise ContractViolation("scale factor must be finite")
    out = _wrap(a.data * a.dtype.type(s))
    return _record(out, (a,), lambda g: (g * a.dtype.type(s),))


def shift(a: Tensor, c: float) -> Tensor:
    c = float(c)
    if not math.isfinite(c):
        raise ContractViolation("shift constant must be finite")
    out = _wrap(a.data + a.dtype.type(c))
    return _record(out, (a,), lambda g: (g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ContractViolation("matmul operands must have at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ContractViolation(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    _conform(_wrap(np.empty(a.shape[:-2])), _wrap(np.empty(b.shape[:-2])), "matmul batch dims")
    if a.dtype != b.dtype:
        raise ContractViolation(f"matmul: mixed dtypes {a.dtype} vs {b.dtype}")
    out = _wrap(a.data @ b.data)

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _record(out, (a, b), bw)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ContractViolation("concat of zero tensors")
    first = tensors[0]
    axis = axis % first.ndim
    for t in tensors[1:]:
        if t.ndim != first.ndim or any(
            t.shape[i] != first.shape[i] for i in range(first.ndim) if i != axis
        ):
            raise ContractViolation("concat: non-axis extents must match")
        if t.dtype != first.dtype:
            raise ContractViolation("concat: mixed dtypes")
    out = _wrap(np.concatenate([t.data for t in tensors], axis=axis))
    offsets = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, offsets, axis=axis))

    return _record(out, tuple(tensors), bw)


def narrow(t: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis (the tape's slice op)."""
    axis = axis % t.ndim
    if start < 0 or length < 0 or start + length > t.shape[axis]:
        raise ContractViolation(
            f"narrow: [{start}, {start + length}) out of range for extent {t.shape[axis]}"
        )
    index = tuple(slice(None) if i != axis else slice(start, start + length) for i in range(t.ndim))
    out = _wrap(np.ascontiguousarray(t.data[index]))

    def bw(g):
        full = np.zeros_like(t.data)
        full[index] = g
        return (full,)

    return _record(out, (t,), bw)


def reshape(t: Tensor, shape: Sequence[int]) -> Tensor:
    out = _wrap(t.data.reshape(shape))
    return _record(out, (t,), lambda g: (g.reshape(t.shape),))


def transpose(t: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = _wrap(np.ascontiguousarray(t.data.transpose(axes)))
    return _record(out, (t,), lambda g: (np.ascontiguousarray(g.transpose(inverse)),))


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    z = t.data - t.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _wrap(y)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record(out, (t,), bw)


def rmsnorm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """Root-mean-square normalization over the last axis, scaled by ``gain``."""
    d = x.shape[-1]
    if gain.shape != (d,):
        raise ContractViolation(f"rmsnorm gain shape {gain.shape} != ({d},)")
    if x.dtype != gain.dtype:
        raise ContractViolation("rmsnorm: mixed dtypes")
    ms = np.mean(x.data * x.data, axis=-1, keepdims=True, dtype=np.float64)
    r = np.sqrt(ms + eps).astype(x.dtype)
    inv = 1.0 / r
    y = x.data * inv * gain.data
    out = _wrap(y)

    def bw(g):
        gg = g * gain.data
        dot = np.sum(gg * x.data, axis=-1, keepdims=True, dtype=np.float64).astype(x.dtype)
        gx = gg * inv - x.data * (dot * inv**3 / d)
        ggain = _unbroadcast(g * x.data * inv, gain.shape)
        return gx, ggain

    return _record(out, (x, gain), bw)


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(t: Tensor) -> Tensor:
    """tanh-form gelu; its backward is the exact derivative of this form."""
    x = t.data
    c = x.dtype.type(_GELU_C)
    a = x.dtype.type(_GELU_A)
    x2 = x * x
    th = np.tanh(c * x * (1.0 + a * x2))
    out = _wrap(0.5 * x * (1.0 + th))

    def bw(g):
        du = c * (1.0 + 3.0 * a * x2)
        return (g * (0.5 * (1.0 + th) + (0.5 * x * du) * (1.0 - th * th)),)

    return _record(out, (t,), bw)


def abs_(t: Tensor) -> Tensor:
    out = _wrap(np.abs(t.data))
    # subgradient 0 at 0: np.sign(0) == 0
    return _record(out, (t,), lambda g: (g * np.sign(t.data),))


def _reduce_bw(g: Array, t: Tensor, axis, keepdims: bool) -> Array:
    if axis is None:
        return np.broadcast_to(g, t.shape).astype(t.dtype, copy=True)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    if not keepdims:
        for ax in sorted(a % t.ndim for a in axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, t.shape).astype(t.dtype, copy=True)


def sum_(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    # float64 accumulation keeps reductions insensitive to summation order
    out = _wrap(np.sum(t.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(t.dtype))
    return _record(out, (t,), lambda g: (_reduce_bw(g, t, axis, keepdims),))


def mean_(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = t.size if axis is None else int(
        np.prod([t.shape[a % t.ndim] for a in ((axis,) if isinstance(axis, int) else axis)])
    )
    out = _wrap(np.mean(t.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(t.dtype))
    return _record(out, (t,), lambda g: (_reduce_bw(g, t, axis, keepdims) / t.dtype.type(n),))


def embedding(table: Tensor, ids: Array) -> Tensor:
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ContractViolation("embedding ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractViolation("embedding id out of range")
    out = _wrap(table.data[ids])

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _record(out, (table,), bw)


CORE_OPS: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "concat": concat,
    "slice": narrow,
    "softmax": softmax,
    "rmsnorm": rmsnorm,
    "gelu": gelu,
    "sum": sum_,
    "mean": mean_,
    "abs": abs_,
    "scale": scale,
}


# ---------------------------------------------------------------------------
# Gradient checking


def _rel_err(a: Array, b: Array, floor: float) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def grad_check(f: Callable, points: Sequence[Tensor], h: float = 1e-3, floor: float = 1e-3) -> float:
    """Max relative error between tape gradients of ``f`` and central differences.

    The check runs in float64 regardless of the points' dtype; coordinates
    where both gradients fall under ``floor`` are compared against ``floor``
    so finite-difference noise does not dominate.
    """
    if not 1e-4 <= h <= 1e-2:
        raise ContractViolation(f"finite-difference step {h} outside [1e-4, 1e-2]")
    pts = [Tensor(p.data.astype(np.float64), requires_grad=True) for p in points]
    with GradTape() as tape:
        out = f(*pts)
    if out.data.size != 1:
        raise ContractViolation("grad_check target must be scalar-valued")
    tape.backward(out)

    worst = 0.0
    for i, p in enumerate(pts):
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        fd = np.zeros_like(flat)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            hi = f(*pts).item()
            flat[j] = orig - h
            lo = f(*pts).item()
            flat[j] = orig
            fd[j] = (hi - lo) / (2.0 * h)
        worst = max(worst, _rel_err(analytic.reshape(-1), fd, floor))
    return worst


def grad_check_params(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    n_samples: int = 50,
    h: float = 1e-3,
    seed: int = 0,
    floor: float = 1e-3,
) -> float:
    """Spot-check tape gradients of a parameterized loss on sampled coordinates.

    ``loss_fn`` must rebuild the loss from ``params`` on every call; the check
    perturbs single coordinates in place for the finite differences.
    """
    if not 1e-4 <= h <= 1e-2:
        raise ContractViolation(f"finite-difference step {h} outside [1e-4, 1e-2]")
    with GradTape() as tape:
        loss = loss_fn()
        if loss.data.size != 1:
            raise ContractViolation("grad_check target must be scalar-valued")
        tape.backward(loss)

    names = sorted(params)
    sizes = np.array([params[k].size for k in names])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    picks = rng.choice(total, size=min(n_samples, total), replace=False)
    bounds = np.cumsum(sizes)

    worst = 0.0
    for pick in picks:
        k = int(np.searchsorted(bounds, pick, side="right"))
        name = names[k]
        j = int(pick - (bounds[k - 1] if k else 0))
        p = params[name]
        analytic = 0.0 if p.grad is None else float(p.grad.reshape(-1)[j])
        flat = p.data.reshape(-1)
        orig = flat[j]
        flat[j] = orig + h
        hi = loss_fn().item()
        flat[j] = orig - h
        lo = loss_fn().item()
        flat[j] = orig
        fd = (hi - lo) / (2.0 * h)
        denom = max(abs(analytic), abs(fd), floor)
        worst = max(worst, abs(analytic - fd) / denom)
    return worst
