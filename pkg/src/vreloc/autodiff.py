"""Minimal dense-tensor reverse-mode differentiation.

Operations record themselves on the active :class:`Tape` (if any).  Without an
active tape they only compute values, which is what inference uses.  There is
no implicit broadcasting: the only mixed-shape addition is :func:`add_bias`.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "no_tape",
    "DimensionError",
    "DomainError",
    "ContractError",
    "GradCheckReport",
    "tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "tanh",
    "sigmoid",
    "log",
    "relu",
    "add_bias",
    "softmax",
    "reshape",
    "slice_rows",
    "concat",
    "stack_columns",
    "gather",
    "total",
    "l2_normalize",
    "grad_check",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """Input lies outside the domain of an operation."""


class ContractError(ValueError):
    """A caller-side precondition was violated."""


class Tensor:
    """A dense array node.

    ``data`` is always a numpy array with at least one dimension.  There is no
    ``requires_grad`` flag: which leaves get gradients is decided by the
    ``wrt`` argument of :meth:`Tape.gradient`.
    """

    __slots__ = ("data", "name")

    def __init__(self, data, name: str | None = None):
        arr = data if type(data) is np.ndarray else np.asarray(data)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)


def tensor(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), name=name)


# --------------------------------------------------------------------------
# tape
# --------------------------------------------------------------------------

_state = threading.local()


def _active_tape() -> "Tape | None":
    return getattr(_state, "tape", None)


class Tape:
    """Ordered record of primitive operations for reverse accumulation.

    Use as a context manager; one tape per thread at a time::

        with Tape() as tape:
            loss = f(params)
        grads = tape.gradient(loss, params)
    """

    def __init__(self) -> None:
        # (output, inputs, backward) triples in forward order
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._prev: Tape | None = None

    def __enter__(self) -> "Tape":
        self._prev = _active_tape()
        _state.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _state.tape = self._prev

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward) -> None:
        self.nodes.append((out, inputs, backward))

    def gradient(self, out: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        """d(out)/d(wrt) by reverse accumulation over the recorded nodes.

        ``out`` must hold a single scalar.  Tensors in ``wrt`` that did not
        participate get an all-zero gradient.
        """
        if out.data.size != 1:
            raise ContractError(f"gradient needs a scalar output, got shape {out.shape}")
        grads: dict[int, np.ndarray] = {id(out): np.ones_like(out.data)}
        for node_out, inputs, backward in reversed(self.nodes):
            g = grads.pop(id(node_out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, backward(g)):
                if gi is None:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        return [
            np.array(grads[id(t)], dtype=np.float64) if id(t) in grads else np.zeros_like(t.data)
            for t in wrt
        ]


@contextmanager
def no_tape():
    """Evaluate without recording, even inside an active tape."""
    prev = _active_tape()
    _state.tape = None
    try:
        yield
    finally:
        _state.tape = prev


def _emit(value: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(value)
    tape = _active_tape()
    if tape is not None:
        tape.record(out, inputs, backward)
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# --------------------------------------------------------------------------
# primitives
# --------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.  Either operand may be a 1-D vector (numpy semantics)."""
    if a.data.ndim > 2 or b.data.ndim > 2 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    A, B = a.data, b.data

    def backward(g):
        if A.ndim == 1:
            # (n,) @ (n, p) -> (p,)
            return B @ g, A[:, None] * g[None, :]
        if B.ndim == 1:
            # (m, n) @ (n,) -> (m,)
            return g[:, None] * B[None, :], A.T @ g
        return g @ B.T, A.T @ g

    return _emit(A @ B, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _emit(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _emit(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    A, B = a.data, b.data
    return _emit(A * B, (a, b), lambda g: (g * B, g * A))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit(a.data * c, (a,), lambda g: (g * c,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _emit(y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    # tanh form never overflows
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _emit(y, (a,), lambda g: (g * y * (1.0 - y),))


def log(a: Tensor) -> Tensor:
    x = a.data
    if np.any(x <= 0):
        raise DomainError("log: input has non-positive entries")
    return _emit(np.log(x), (a,), lambda g: (g / x,))


def relu(a: Tensor) -> Tensor:
    x = a.data
    return _emit(np.maximum(x, 0.0), (a,), lambda g: (g * (x > 0),))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add vector ``b`` (length m) to every column of ``x`` (m x n), or to ``x`` (m,)."""
    if b.data.ndim != 1 or x.data.ndim not in (1, 2) or x.shape[0] != b.shape[0]:
        raise DimensionError(f"add_bias: cannot add bias {b.shape} to {x.shape}")
    if x.data.ndim == 1:
        return _emit(x.data + b.data, (x, b), lambda g: (g, g))
    return _emit(x.data + b.data[:, None], (x, b), lambda g: (g, g.sum(axis=1)))


def softmax(x: Tensor) -> Tensor:
    """Softmax of a vector, or of every column of a matrix."""
    X = x.data
    z = X - X.max(axis=0)
    e = np.exp(z)
    y = e / e.sum(axis=0)

    def backward(g):
        return (y * (g - (g * y).sum(axis=0)),)

    return _emit(y, (x,), backward)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    try:
        y = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: {old} -> {shape}") from exc
    return _emit(y, (x,), lambda g: (g.reshape(old),))


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= x.shape[0]:
        raise DimensionError(f"slice_rows: [{start}:{stop}] out of range for {x.shape}")
    X = x.data

    def backward(g):
        full = np.zeros_like(X)
        full[start:stop] = g
        return (full,)

    return _emit(X[start:stop], (x,), backward)


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the first axis."""
    if not parts:
        raise ContractError("concat: nothing to concatenate")
    tails = {p.shape[1:] for p in parts}
    if len(tails) != 1:
        raise DimensionError(f"concat: incompatible shapes {[p.shape for p in parts]}")
    sizes = np.cumsum([p.shape[0] for p in parts])[:-1]
    return _emit(
        np.concatenate([p.data for p in parts], axis=0),
        tuple(parts),
        lambda g: tuple(np.split(g, sizes, axis=0)),
    )


def stack_columns(cols: Sequence[Tensor]) -> Tensor:
    """Stack equal-length vectors as the columns of a matrix."""
    if not cols:
        raise ContractError("stack_columns: empty sequence")
    shapes = {c.shape for c in cols}
    if len(shapes) != 1 or cols[0].data.ndim != 1:
        raise DimensionError(f"stack_columns: need equal 1-D vectors, got {sorted(shapes)}")
    n = len(cols)
    return _emit(
        np.stack([c.data for c in cols], axis=1),
        tuple(cols),
        lambda g: tuple(g[:, j] for j in range(n)),
    )


def gather(x: Tensor, index: np.ndarray) -> Tensor:
    """Pick entries of ``x`` by flat (row-major) index; returns a vector."""
    idx = np.asarray(index, dtype=np.intp).ravel()
    X = x.data
    if idx.size and (idx.min() < 0 or idx.max() >= X.size):
        raise DimensionError(f"gather: index out of range for {x.shape}")

    def backward(g):
        full = np.zeros(X.size)
        np.add.at(full, idx, g)
        return (full.reshape(X.shape),)

    return _emit(X.ravel()[idx], (x,), backward)


def total(x: Tensor) -> Tensor:
    """Sum of all entries, as a 1-element tensor."""
    X = x.data
    return _emit(np.array([X.sum()]), (x,), lambda g: (np.full_like(X, g[0]),))


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """x / ||x|| for a vector, or column-wise for a matrix."""
    X = x.data
    n = np.sqrt((X * X).sum(axis=0)) + eps
    y = X / n

    def backward(g):
        return ((g - y * (g * y).sum(axis=0)) / n,)

    return _emit(y, (x,), backward)


# --------------------------------------------------------------------------
# gradient checking
# --------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_err: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-4

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst < self.tol

    def lines(self) -> list[str]:
        out = [f"{name}\t{err:.3e}\t{'ok' if err < self.tol else 'FAIL'}"
               for name, err in self.max_rel_err.items()]
        out.append(f"max\t{self.worst:.3e}\t{'PASS' if self.passed else 'FAIL'}")
        return out


def grad_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor] | Iterable[tuple[str, Tensor]],
    eps: float = 1e-5,
    tol: float = 1e-4,
    precision: str = "double",
) -> GradCheckReport:
    """Compare tape gradients of ``f`` against central finite differences.

    ``f`` takes no arguments and reads the parameter tensors directly; they
    are perturbed in place and restored.  Parameters must be float64 and the
    analytic gradient is always taken in float64.

    With ``precision="extended"`` the finite-difference evaluations run in
    ``np.longdouble``.  Central differences in float64 carry an absolute error
    of roughly ulp(f) / eps, which swamps gradient entries near the 1e-8
    denominator floor on deep recurrent models.
    """
    if precision not in ("double", "extended"):
        raise ContractError(f"unknown precision {precision!r}")
    named = list(params.items()) if isinstance(params, Mapping) else list(params)
    for name, p in named:
        if p.data.dtype != np.float64:
            raise ContractError(f"grad_check needs float64 parameters; {name} is {p.data.dtype}")

    with Tape() as tape:
        out = f()
    if out.data.size != 1:
        raise ContractError(f"grad_check: f must be scalar, got shape {out.shape}")
    analytic = tape.gradient(out, [p for _, p in named])

    originals = [p.data for _, p in named]
    oracle_dtype = np.longdouble if precision == "extended" else np.float64
    for _, p in named:
        p.data = p.data.astype(oracle_dtype)
    step = oracle_dtype(eps)
    report = GradCheckReport(tol=tol)
    try:
        with no_tape():
            for (name, p), a_grad in zip(named, analytic):
                flat = p.data.reshape(-1)
                a_flat = a_grad.reshape(-1)
                worst = 0.0
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + step
                    fp = f().data[0]
                    flat[i] = orig - step
                    fm = f().data[0]
                    flat[i] = orig
                    num = (fp - fm) / (2 * step)
                    ana = a_flat[i]
                    denom = max(abs(float(ana)), abs(float(num)), 1e-8)
                    worst = max(worst, float(abs(oracle_dtype(ana) - num)) / denom)
                report.max_rel_err[name] = worst
    finally:
        for (_, p), data in zip(named, originals):
            p.data = data
    return report
