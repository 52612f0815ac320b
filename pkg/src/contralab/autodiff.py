"""Minimal define-by-run reverse-mode differentiation over 2-D float64 arrays.

Every operation appends a record to the active :class:`Tape`; :func:`backward`
walks the records of that tape in exact reverse order.  Gradients accumulate on
leaf tensors (``requires_grad=True`` and no producing record) and are never
cleared implicitly: calling :func:`backward` twice adds the gradients twice.
Callers that train zero them with :func:`zero_grad`.

Tapes are thread-confined.  Operations executed outside a ``with Tape():`` block
go to a per-thread default tape that grows until :func:`reset_default_tape`.

Backward rules live in :data:`BACKWARD_RULES` keyed by operation name so they can
be inspected (and, in mutation tests, replaced).
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

__all__ = [
    "BACKWARD_RULES",
    "DimensionError",
    "DomainError",
    "DegenerateEmbeddingError",
    "NumericError",
    "Tape",
    "Tensor",
    "add",
    "add_row_vector",
    "backward",
    "concat_cols",
    "concat_rows",
    "constant",
    "elementwise",
    "exp",
    "grad_check",
    "l2_normalize_rows",
    "leaky_relu",
    "log",
    "log_sum_exp_rows",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "parameter",
    "reduce",
    "relu",
    "reset_default_tape",
    "scale",
    "shift",
    "sub",
    "sum_",
    "take_rows",
    "tanh",
    "transpose",
    "zero_grad",
]

NORM_FLOOR = 1e-12


class DimensionError(ValueError):
    pass


class DomainError(ValueError):
    pass


class DegenerateEmbeddingError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


_tape_ids = itertools.count()


@dataclass
class Record:
    op: str
    inputs: tuple["Tensor", ...]
    output: "Tensor"
    ctx: dict[str, Any]


@dataclass
class Tape:
    """Ordered operation records for one forward pass."""

    records: list[Record] = field(default_factory=list)
    tape_id: int = field(default_factory=lambda: next(_tape_ids))

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def __len__(self) -> int:
        return len(self.records)


_local = threading.local()


def _stack() -> list[Tape]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def _active_tape() -> Tape:
    stack = _stack()
    if stack:
        return stack[-1]
    if getattr(_local, "default", None) is None:
        _local.default = Tape()
    return _local.default


def reset_default_tape() -> None:
    _local.default = None


@contextmanager
def no_grad():
    """Run operations without recording them; outputs are constants."""
    prev = getattr(_local, "no_grad", False)
    _local.no_grad = True
    try:
        yield
    finally:
        _local.no_grad = prev


class Tensor:
    """Dense 2-D real matrix with an optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "tape_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise DimensionError(f"tensors are 2-D, got array of shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        # (tape id, record index) for op outputs; None for leaves
        self.tape_id: tuple[int, int] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def is_leaf(self) -> bool:
        return self.tape_id is None

    def item(self) -> float:
        if self.data.shape != (1, 1):
            raise DimensionError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self.shape))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.shape))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.shape), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def _as_tensor(x, shape) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full(shape, float(x)))


def _emit(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, **ctx) -> Tensor:
    out = Tensor(out_data)
    if not getattr(_local, "no_grad", False) and any(t.requires_grad for t in inputs):
        tape = _active_tape()
        for t in inputs:
            if t.tape_id is not None and t.requires_grad and t.tape_id[0] != tape.tape_id:
                raise RuntimeError(f"{op}: input was recorded on another tape; gradients cannot cross tapes")
        out.requires_grad = True
        out.tape_id = (tape.tape_id, len(tape.records))
        tape.records.append(Record(op, tuple(inputs), out, ctx))
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# forward operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _emit("matmul", (a, b), a.data @ b.data)


def transpose(a: Tensor) -> Tensor:
    return _emit("transpose", (a,), a.data.T.copy())


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _emit("add", (a, b), a.data + b.data)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _emit("sub", (a, b), a.data - b.data)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    return _emit("mul", (a, b), a.data * b.data)


def scale(a: Tensor, c: float) -> Tensor:
    return _emit("scale", (a,), a.data * c, c=c)


def shift(a: Tensor, c: float) -> Tensor:
    return _emit("shift", (a,), a.data + c)


def relu(a: Tensor) -> Tensor:
    return _emit("relu", (a,), np.maximum(a.data, 0.0))


def leaky_relu(a: Tensor, alpha: float = 0.2) -> Tensor:
    return _emit("leaky_relu", (a,), np.where(a.data > 0, a.data, alpha * a.data), alpha=alpha)


def tanh(a: Tensor) -> Tensor:
    return _emit("tanh", (a,), np.tanh(a.data))


def exp(a: Tensor) -> Tensor:
    return _emit("exp", (a,), np.exp(a.data))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log: input has non-positive entries")
    return _emit("log", (a,), np.log(a.data))


_UNARY: dict[str, Callable[..., Tensor]] = {
    "relu": relu,
    "leaky_relu": leaky_relu,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "scale": scale,
    "shift": shift,
}
_BINARY: dict[str, Callable[[Tensor, Tensor], Tensor]] = {"add": add, "sub": sub, "mul": mul}


def elementwise(a: Tensor, kind: str, other: Tensor | float | None = None) -> Tensor:
    """Dispatch by name: binary kinds take a tensor ``other``; ``scale``,
    ``shift`` and ``leaky_relu`` take a float ``other`` (slope defaults to 0.2)."""
    if kind in _BINARY:
        if not isinstance(other, Tensor):
            raise TypeError(f"{kind} needs a second tensor")
        return _BINARY[kind](a, other)
    if kind not in _UNARY:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    if kind in ("scale", "shift"):
        return _UNARY[kind](a, float(other))  # type: ignore[arg-type]
    if kind == "leaky_relu" and other is not None:
        return leaky_relu(a, float(other))  # type: ignore[arg-type]
    return _UNARY[kind](a)


def add_row_vector(a: Tensor, row: Tensor) -> Tensor:
    """``a + row`` with a 1 x cols row broadcast down the rows (bias add)."""
    if row.shape != (1, a.shape[1]):
        raise DimensionError(f"add_row_vector: expected row of shape (1, {a.shape[1]}), got {row.shape}")
    return _emit("add_row_vector", (a, row), a.data + row.data)


def take_rows(a: Tensor, index) -> Tensor:
    idx = np.asarray(index, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise IndexError(f"take_rows: index out of range for {a.shape[0]} rows")
    return _emit("take_rows", (a,), a.data[idx], index=idx, n_rows=a.shape[0])


def concat_cols(*parts: Tensor) -> Tensor:
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise DimensionError(f"concat_cols: row counts differ {[p.shape for p in parts]}")
    widths = [p.shape[1] for p in parts]
    return _emit("concat_cols", parts, np.concatenate([p.data for p in parts], axis=1), widths=widths)


def concat_rows(*parts: Tensor) -> Tensor:
    cols = {p.shape[1] for p in parts}
    if len(cols) != 1:
        raise DimensionError(f"concat_rows: column counts differ {[p.shape for p in parts]}")
    heights = [p.shape[0] for p in parts]
    return _emit("concat_rows", parts, np.concatenate([p.data for p in parts], axis=0), heights=heights)


def reduce(a: Tensor, kind: str = "mean", axis: str = "all") -> Tensor:
    """Sum or mean.  ``axis='rows'`` reduces within each row (-> rows x 1),
    ``axis='cols'`` within each column (-> 1 x cols)."""
    if kind not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {kind!r}")
    np_axis = {"all": None, "rows": 1, "cols": 0}[axis]
    out = a.data.sum(axis=np_axis, keepdims=True)
    if np_axis is None:
        out = out.reshape(1, 1)
    count = a.data.size if np_axis is None else a.data.shape[np_axis]
    if kind == "mean":
        out = out / max(count, 1)
    return _emit("reduce", (a,), out, kind=kind, axis=np_axis, count=count)


def mean(a: Tensor, axis: str = "all") -> Tensor:
    return reduce(a, "mean", axis)


def sum_(a: Tensor, axis: str = "all") -> Tensor:
    return reduce(a, "sum", axis)


def log_sum_exp_rows(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Per-row ``log(sum(exp(a)))`` with max subtraction.

    ``mask`` (boolean, same shape) restricts each row's sum to its True
    entries; every row must keep at least one entry.
    """
    if a.shape[1] == 0 or a.shape[0] == 0:
        raise DimensionError(f"log_sum_exp_rows: empty input of shape {a.shape}")
    x = a.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != a.shape:
            raise DimensionError(f"log_sum_exp_rows: mask shape {mask.shape} != {a.shape}")
        if not mask.any(axis=1).all():
            raise DimensionError("log_sum_exp_rows: a row has no unmasked entries")
        x = np.where(mask, x, -np.inf)
    peak = x.max(axis=1, keepdims=True)
    shifted = np.exp(x - peak)
    total = shifted.sum(axis=1, keepdims=True)
    out = peak + np.log(total)
    return _emit("log_sum_exp_rows", (a,), out, weights=shifted / total)


def l2_normalize_rows(a: Tensor) -> Tensor:
    norms = np.sqrt((a.data * a.data).sum(axis=1, keepdims=True))
    if np.any(norms < NORM_FLOOR):
        bad = int(np.argmax(norms[:, 0] < NORM_FLOOR))
        raise DegenerateEmbeddingError(f"row {bad} has norm below {NORM_FLOOR:g}; cannot project to the sphere")
    out = a.data / norms
    return _emit("l2_normalize_rows", (a,), out, norms=norms)


# ---------------------------------------------------------------------------
# backward rules: (record, grad_out) -> tuple of input grads (None = no grad)


def _bw_matmul(rec, g):
    a, b = rec.inputs
    return g @ b.data.T, a.data.T @ g


def _bw_take_rows(rec, g):
    out = np.zeros((rec.ctx["n_rows"], g.shape[1]))
    np.add.at(out, rec.ctx["index"], g)
    return (out,)


def _bw_concat_cols(rec, g):
    edges = np.cumsum([0] + rec.ctx["widths"])
    return tuple(g[:, lo:hi] for lo, hi in zip(edges[:-1], edges[1:]))


def _bw_concat_rows(rec, g):
    edges = np.cumsum([0] + rec.ctx["heights"])
    return tuple(g[lo:hi] for lo, hi in zip(edges[:-1], edges[1:]))


def _bw_reduce(rec, g):
    (a,) = rec.inputs
    if rec.ctx["kind"] == "mean":
        g = g / max(rec.ctx["count"], 1)
    return (np.broadcast_to(g, a.shape).copy(),)


def _bw_l2_normalize(rec, g):
    y = rec.output.data
    # d(x/|x|) = (I - y y^T) / |x|
    return ((g - y * (g * y).sum(axis=1, keepdims=True)) / rec.ctx["norms"],)


BACKWARD_RULES: dict[str, Callable[[Record, np.ndarray], tuple]] = {
    "matmul": _bw_matmul,
    "transpose": lambda rec, g: (g.T,),
    "add": lambda rec, g: (g, g),
    "sub": lambda rec, g: (g, -g),
    "mul": lambda rec, g: (g * rec.inputs[1].data, g * rec.inputs[0].data),
    "scale": lambda rec, g: (g * rec.ctx["c"],),
    "shift": lambda rec, g: (g,),
    "relu": lambda rec, g: (g * (rec.inputs[0].data > 0),),
    "leaky_relu": lambda rec, g: (g * np.where(rec.inputs[0].data > 0, 1.0, rec.ctx["alpha"]),),
    "tanh": lambda rec, g: (g * (1.0 - rec.output.data**2),),
    "exp": lambda rec, g: (g * rec.output.data,),
    "log": lambda rec, g: (g / rec.inputs[0].data,),
    "add_row_vector": lambda rec, g: (g, g.sum(axis=0, keepdims=True)),
    "take_rows": _bw_take_rows,
    "concat_cols": _bw_concat_cols,
    "concat_rows": _bw_concat_rows,
    "reduce": _bw_reduce,
    "log_sum_exp_rows": lambda rec, g: (g * rec.ctx["weights"],),
    "l2_normalize_rows": _bw_l2_normalize,
}


def backward(objective: Tensor) -> None:
    """Accumulate d(objective)/d(leaf) into every reachable leaf's ``grad``."""
    if objective.shape != (1, 1):
        raise DimensionError(f"backward needs a scalar (1x1) objective, got {objective.shape}")
    if objective.tape_id is None:
        if objective.requires_grad:
            _accumulate(objective, np.ones((1, 1)))
        return
    tape = _find_tape(objective.tape_id[0])
    end = objective.tape_id[1]
    pending: dict[int, np.ndarray] = {id(objective): np.ones((1, 1))}
    for rec in reversed(tape.records[: end + 1]):
        g = pending.pop(id(rec.output), None)
        if g is None:
            continue
        grads = BACKWARD_RULES[rec.op](rec, g)
        for inp, gi in zip(rec.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp.tape_id is None:
                _accumulate(inp, gi)
            elif id(inp) in pending:
                pending[id(inp)] = pending[id(inp)] + gi
            else:
                pending[id(inp)] = gi


def _accumulate(leaf: Tensor, g: np.ndarray) -> None:
    if leaf.grad is None:
        leaf.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        leaf.grad += g


def _find_tape(tape_id: int) -> Tape:
    for tape in reversed(_stack()):
        if tape.tape_id == tape_id:
            return tape
    default = getattr(_local, "default", None)
    if default is not None and default.tape_id == tape_id:
        return default
    raise RuntimeError("objective's tape is no longer active in this thread")


def zero_grad(tensors) -> None:
    for t in tensors:
        t.grad = None


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor | np.ndarray, eps: float = 1e-6) -> float:
    """Max over entries of ``|g_ad - g_fd| / max(1, |g_fd|)`` using central differences.

    ``f`` must be a pure function of its tensor argument returning a 1x1 tensor.
    """
    if not 0.0 < eps <= 1e-2:
        raise ValueError(f"eps must lie in (0, 1e-2], got {eps}")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if base.ndim != 2:
        base = Tensor(base).data
    leaf = parameter(base.copy())
    with Tape():
        out = f(leaf)
        backward(out)
    g_ad = leaf.grad if leaf.grad is not None else np.zeros_like(base)
    g_fd = np.zeros_like(base)
    probe = base.copy()
    for idx in np.ndindex(*base.shape):
        orig = probe[idx]
        probe[idx] = orig + eps
        hi = _scalar(f, probe)
        probe[idx] = orig - eps
        lo = _scalar(f, probe)
        probe[idx] = orig
        g_fd[idx] = (hi - lo) / (2.0 * eps)
    if not (np.all(np.isfinite(g_ad)) and np.all(np.isfinite(g_fd))):
        raise NumericError("grad_check: non-finite gradient encountered")
    return float(np.max(np.abs(g_ad - g_fd) / np.maximum(1.0, np.abs(g_fd)), initial=0.0))


def _scalar(f, arr: np.ndarray) -> float:
    with Tape():
        v = f(constant(arr.copy())).item()
    if not np.isfinite(v):
        raise NumericError("grad_check: objective is not finite")
    return v
