"""Dense float64 tensors with a reverse-mode gradient tape.

All computation runs in 64-bit reals. Shapes are explicit and broadcasting is
limited to the few patterns the pipeline needs (a row-vector bias, scalar
constants). Every operation checks that its output is finite; a NaN or Inf
anywhere is an error, not a value.

Gradients are recorded on an explicit :class:`Tape`. Operations executed while
a tape is active append one node each; ``backward(loss)`` replays the tape in
reverse exactly once and accumulates ``.grad`` on every tensor that requires
gradients. A tape can be consumed once; reuse without ``reset()`` is an error.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

NORM_EPS = 1e-12


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NumericError(ArithmeticError):
    """An operation produced or received non-finite values."""


class DegenerateVectorError(ValueError):
    """A near-zero-norm vector was used where a direction is required."""


class TapeStateError(RuntimeError):
    """Backward was called on a detached tensor or an already-consumed tape."""


def _as_f64(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    return np.ascontiguousarray(arr)


class Tensor:
    """A shaped float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_f64(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._tape: "Tape | None" = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic sugar; Tensor-Tensor ops require identical shapes
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else shift(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else shift(self, -float(other))

    def __rsub__(self, other):
        return shift(neg(self), float(other))

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise DimensionError("tensor/tensor division is not supported; use scale()")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)


_VjpFn = Callable[[np.ndarray], tuple]


class Tape:
    """Ordered record of executed operations for one reverse pass."""

    __slots__ = ("_nodes", "_spent")

    def __init__(self):
        self._nodes: list[tuple[tuple[Tensor, ...], Tensor, _VjpFn]] = []
        self._spent = False

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> bool:
        _ACTIVE.pop()
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def reset(self) -> None:
        self._nodes.clear()
        self._spent = False


_ACTIVE: list[Tape] = []


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"{op} produced non-finite values")


def _emit(out_data: np.ndarray, inputs: tuple[Tensor, ...], vjp: _VjpFn, op: str) -> Tensor:
    _check_finite(out_data, op)
    out = Tensor(out_data)
    if _ACTIVE and any(t.requires_grad for t in inputs):
        tape = _ACTIVE[-1]
        out.requires_grad = True
        out._tape = tape
        tape._nodes.append((inputs, out, vjp))
    return out


def backward(loss: Tensor) -> None:
    """Accumulate gradients of a taped scalar into every requires_grad tensor."""
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise TapeStateError("loss is detached: no taped operations produced it")
    if tape._spent:
        raise TapeStateError("backward already called on this tape; reset() before reuse")
    tape._spent = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for inputs, out, vjp in reversed(tape._nodes):
        out_grad = grads.pop(id(out), None)
        holders.pop(id(out), None)
        if out_grad is None:
            continue  # dead branch: no path from this output to the loss
        out.grad = out_grad if out.grad is None else out.grad + out_grad
        for t, g in zip(inputs, vjp(out_grad)):
            if g is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
                holders[key] = t
    for key, g in grads.items():
        t = holders[key]
        t.grad = g if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# elementwise and structural operations

def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _emit(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _emit(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit(x.data * c, (x,), lambda g: (g * c,), "scale")


def shift(x: Tensor, c: float) -> Tensor:
    return _emit(x.data + float(c), (x,), lambda g: (g,), "shift")


def neg(x: Tensor) -> Tensor:
    return _emit(-x.data, (x,), lambda g: (-g,), "neg")


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a length-m row vector to every row of an (n, m) matrix."""
    if x.data.ndim != 2 or bias.data.ndim != 1 or x.shape[1] != bias.shape[0]:
        raise DimensionError(f"add_bias: {x.shape} incompatible with {bias.shape}")
    return _emit(x.data + bias.data, (x, bias), lambda g: (g, g.sum(axis=0)), "add_bias")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _emit(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    xd = x.data
    return _emit(out, (x,), lambda g: (g / xd,), "log")


def clip_min(x: Tensor, floor: float) -> Tensor:
    """Elementwise max(x, floor); gradient is zero where the floor binds."""
    floor = float(floor)
    mask = x.data > floor
    return _emit(np.where(mask, x.data, floor), (x,), lambda g: (g * mask,), "clip_min")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise DimensionError(f"reshape {x.shape} -> {shape}: size mismatch")
    old = x.shape
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise DimensionError(f"transpose needs a matrix, got shape {x.shape}")
    return _emit(np.ascontiguousarray(x.data.T), (x,), lambda g: (g.T,), "transpose")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions disagree, {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    return _emit(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def gather_rows(x: Tensor, index) -> Tensor:
    """Select rows of an (n, d) matrix; gradients scatter-add back to the source."""
    if x.data.ndim != 2:
        raise DimensionError(f"gather_rows needs a matrix, got shape {x.shape}")
    idx = np.asarray(index, dtype=np.intp)
    if idx.ndim != 1:
        raise DimensionError("gather_rows: index must be one-dimensional")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise DimensionError("gather_rows: index out of range")
    n, d = x.shape

    def vjp(g):
        gx = np.zeros((n, d))
        np.add.at(gx, idx, g)
        return (gx,)

    return _emit(x.data[idx], (x,), vjp, "gather_rows")


def row_splice(base: Tensor, rows: Tensor, index) -> Tensor:
    """Copy of ``base`` with rows at unique ``index`` replaced by ``rows``."""
    if base.data.ndim != 2 or rows.data.ndim != 2:
        raise DimensionError("row_splice needs matrices")
    idx = np.asarray(index, dtype=np.intp)
    if rows.shape != (idx.size, base.shape[1]):
        raise DimensionError(
            f"row_splice: rows {rows.shape} incompatible with {idx.size} indices into {base.shape}"
        )
    if idx.size and (idx.min() < 0 or idx.max() >= base.shape[0]):
        raise DimensionError("row_splice: index out of range")
    if np.unique(idx).size != idx.size:
        raise DimensionError("row_splice: duplicate indices")
    out = base.data.copy()
    out[idx] = rows.data

    def vjp(g):
        g_base = g.copy()
        g_base[idx] = 0.0
        return (g_base, g[idx])

    return _emit(out, (base, rows), vjp, "row_splice")


# ---------------------------------------------------------------------------
# normalisation, softmax, cosine

def normalize_rows(x: Tensor) -> Tensor:
    """Scale every row of an (n, d) matrix to unit L2 norm."""
    if x.data.ndim != 2:
        raise DimensionError(f"normalize_rows needs a matrix, got shape {x.shape}")
    norms = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    if (norms <= NORM_EPS).any():
        raise DegenerateVectorError("normalize_rows: row with near-zero norm")
    out = x.data / norms

    def vjp(g):
        return ((g - out * (g * out).sum(axis=1, keepdims=True)) / norms,)

    return _emit(out, (x,), vjp, "normalize_rows")


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax with max-subtraction; each output row sums to one."""
    if x.data.ndim != 2:
        raise DimensionError(f"softmax_rows needs a matrix, got shape {x.shape}")
    if not np.isfinite(x.data).all():
        raise NumericError("softmax_rows received non-finite input")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _emit(out, (x,), vjp, "softmax_rows")


def cosine(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity of two vectors; result is a taped scalar in [-1, 1]."""
    if a.data.ndim != 1 or b.data.ndim != 1 or a.shape != b.shape:
        raise DimensionError(f"cosine needs two equal-length vectors, got {a.shape}, {b.shape}")
    ad, bd = a.data, b.data
    na = float(np.sqrt(ad @ ad))
    nb = float(np.sqrt(bd @ bd))
    if na <= NORM_EPS or nb <= NORM_EPS:
        raise DegenerateVectorError("cosine: operand with near-zero norm")
    dot = float(ad @ bd)
    out = np.asarray(dot / (na * nb))

    def vjp(g):
        gs = float(g)
        ga = gs * (bd / (na * nb) - dot * ad / (na ** 3 * nb))
        gb = gs * (ad / (na * nb) - dot * bd / (na * nb ** 3))
        return (ga, gb)

    return _emit(out, (a, b), vjp, "cosine")


# ---------------------------------------------------------------------------
# reductions

_REDUCE_KINDS = ("sum", "mean", "max")


def reduce(x: Tensor, kind: str, axis: int | None = None) -> Tensor:
    """Reduce over one axis (or all). Max ties break to the lowest index."""
    if kind not in _REDUCE_KINDS:
        raise ValueError(f"reduce kind must be one of {_REDUCE_KINDS}, got {kind!r}")
    xd = x.data
    if axis is not None:
        if not -xd.ndim <= axis < xd.ndim:
            raise DimensionError(f"reduce: axis {axis} invalid for shape {x.shape}")
        axis = axis % xd.ndim
        if xd.shape[axis] == 0:
            raise DimensionError("reduce over an empty axis")
    elif xd.size == 0:
        raise DimensionError("reduce of an empty tensor")

    shape = xd.shape
    if kind in ("sum", "mean"):
        out = xd.sum(axis=axis)
        count = xd.size if axis is None else shape[axis]
        factor = 1.0 / count if kind == "mean" else 1.0

        if kind == "mean":
            out = out * factor

        def vjp(g, _axis=axis, _f=factor):
            if _axis is None:
                return (np.full(shape, float(g) * _f),)
            return (np.broadcast_to(np.expand_dims(g * _f, _axis), shape).copy(),)

        return _emit(out, (x,), vjp, kind)

    # max: remember argmax for the reverse pass (np.argmax takes the lowest index)
    if axis is None:
        out = xd.max()
        flat_arg = int(xd.argmax())

        def vjp(g):
            gx = np.zeros(shape)
            gx.flat[flat_arg] = float(g)
            return (gx,)

        return _emit(np.asarray(out), (x,), vjp, "max")

    out = xd.max(axis=axis)
    arg = np.expand_dims(xd.argmax(axis=axis), axis)

    def vjp(g, _axis=axis):
        gx = np.zeros(shape)
        np.put_along_axis(gx, arg, np.expand_dims(g, _axis), _axis)
        return (gx,)

    return _emit(out, (x,), vjp, "max")


# ---------------------------------------------------------------------------
# finite-difference oracle

@dataclass
class GradCheckReport:
    max_rel_err: float
    tol: float
    passed: bool
    worst_coord: tuple[int, ...] | None
    n_coords: int

    def __str__(self) -> str:
        state = "pass" if self.passed else "FAIL"
        return f"grad_check {state}: max rel err {self.max_rel_err:.3e} (tol {self.tol:.1e})"


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare the taped gradient of scalar ``f`` at ``x`` against central differences.

    The relative error per coordinate is |a - d| / max(1, |a|, |d|); the check
    passes iff the maximum over coordinates is at most ``tol``. ``f`` must be
    deterministic and must not retain its argument.
    """
    probe = Tensor(x.data.copy(), requires_grad=True)
    with Tape():
        y = f(probe)
    if not isinstance(y, Tensor) or y.data.size != 1:
        raise DimensionError("grad_check: f must return a scalar tensor")
    backward(y)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(probe.data)

    base = probe.data.copy()
    worst = 0.0
    worst_coord: tuple[int, ...] | None = None
    for coord in np.ndindex(*base.shape):
        orig = base[coord]
        base[coord] = orig + h
        fp = f(Tensor(base)).item()
        base[coord] = orig - h
        fm = f(Tensor(base)).item()
        base[coord] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError("grad_check: probe evaluation returned non-finite value")
        fd = (fp - fm) / (2.0 * h)
        a = float(analytic[coord])
        rel = abs(a - fd) / max(1.0, abs(a), abs(fd))
        if rel > worst:
            worst = rel
            worst_coord = coord
    return GradCheckReport(
        max_rel_err=worst,
        tol=tol,
        passed=worst <= tol,
        worst_coord=worst_coord,
        n_coords=base.size,
    )
