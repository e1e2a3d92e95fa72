"""Small reverse-mode autodiff over dense float64 arrays.

A :class:`Tape` records every primitive applied to a :class:`Var` and replays
them backwards once to produce gradients for its leaves. Every primitive also
accepts plain numpy arrays; if none of the inputs is a ``Var`` the numpy
result is returned directly, so forward-only code paths share one
implementation with the differentiable ones.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


def _freeze(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


class Var:
    """Reference to a tensor recorded on a tape."""

    __slots__ = ("tape", "index", "value", "name")
    __array_priority__ = 100.0

    def __init__(self, tape: "Tape", index: int, value: np.ndarray, name: str | None = None):
        self.tape = tape
        self.index = index
        self.value = value
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def T(self) -> "Var":
        return transpose(self)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Var#{self.index}{label}(shape={self.shape})"

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

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return take(self, idx)


@dataclass
class _Node:
    op: str
    parents: tuple[int | None, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None


class Tape:
    """Append-only record of primitive applications."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.leaves: list[Var] = []
        self.consumed = False

    def __len__(self) -> int:
        return len(self.nodes)

    def param(self, value, name: str | None = None) -> Var:
        """Register a trainable leaf. The array is copied."""
        if self.consumed:
            raise TapeError("tape already consumed by backward()")
        arr = _freeze(np.array(value, dtype=np.float64))
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"leaf {name!r} has non-finite entries")
        self.nodes.append(_Node("leaf", (), None))
        v = Var(self, len(self.nodes) - 1, arr, name)
        self.leaves.append(v)
        return v

    def record(self, op: str, *inputs, **kwargs) -> Var:
        """Apply primitive ``op`` by name to ``inputs``."""
        try:
            fn = PRIMITIVES[op]
        except KeyError:
            raise ValueError(f"unknown primitive {op!r}; known: {sorted(PRIMITIVES)}") from None
        out = fn(*inputs, **kwargs)
        if not isinstance(out, Var):
            raise TapeError(f"{op}: no input lives on a tape")
        return out

    def _push(self, op: str, inputs, value: np.ndarray, vjp) -> Var:
        if self.consumed:
            raise TapeError("tape already consumed by backward()")
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(f"primitive '{op}' produced a non-finite value")
        parents = tuple(x.index if isinstance(x, Var) else None for x in inputs)
        self.nodes.append(_Node(op, parents, vjp))
        return Var(self, len(self.nodes) - 1, _freeze(value))

    def backward(self, output: Var, leaves: Sequence[Var] | None = None) -> dict[Var, np.ndarray]:
        """Reverse sweep from scalar ``output``; returns a gradient for every leaf."""
        if self.consumed:
            raise TapeError("tape already consumed by backward()")
        wanted = self.leaves if leaves is None else leaves
        if not isinstance(output, Var) and np.ndim(output) == 0:
            # a constant: nothing upstream depends on any leaf
            self.consumed = True
            return {v: np.zeros(v.shape) for v in wanted}
        if not isinstance(output, Var) or output.tape is not self:
            raise TapeError("output does not belong to this tape")
        if output.shape != ():
            raise TapeError(f"backward needs a scalar output, got shape {output.shape}")
        self.consumed = True
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[output.index] = np.ones(())
        for i in range(output.index, -1, -1):
            g = grads[i]
            node = self.nodes[i]
            if g is None or node.vjp is None:
                continue
            for p, pg in zip(node.parents, node.vjp(g)):
                if p is None or pg is None:
                    continue
                grads[p] = pg if grads[p] is None else grads[p] + pg
        return {
            v: (grads[v.index] if grads[v.index] is not None else np.zeros(v.shape)).copy()
            for v in wanted
        }


def value(x) -> np.ndarray:
    """Underlying numpy value of a Var or array-like."""
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _tape_of(*xs) -> Tape | None:
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is not None and x.tape is not tape:
                raise TapeError("inputs come from different tapes")
            tape = x.tape
    return tape


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _bshape(op: str, a: np.ndarray, b: np.ndarray) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def _binary(op: str, x, y, fwd, vjp_x, vjp_y):
    a, b = value(x), value(y)
    _bshape(op, a, b)
    out = fwd(a, b)
    tape = _tape_of(x, y)
    if tape is None:
        return out

    def vjp(g):
        gx = _unbroadcast(vjp_x(g, a, b, out), a.shape) if isinstance(x, Var) else None
        gy = _unbroadcast(vjp_y(g, a, b, out), b.shape) if isinstance(y, Var) else None
        return gx, gy

    return tape._push(op, (x, y), np.asarray(out, dtype=np.float64), vjp)


def _unary(op: str, x, fwd, vjp_fn):
    a = value(x)
    out = fwd(a)
    if not isinstance(x, Var):
        return out
    return x.tape._push(op, (x,), np.asarray(out, dtype=np.float64), lambda g: (vjp_fn(g, a, out),))


# -- elementwise -----------------------------------------------------------

def add(x, y):
    return _binary("add", x, y, np.add, lambda g, a, b, o: g, lambda g, a, b, o: g)


def sub(x, y):
    return _binary("sub", x, y, np.subtract, lambda g, a, b, o: g, lambda g, a, b, o: -g)


def mul(x, y):
    return _binary("mul", x, y, np.multiply, lambda g, a, b, o: g * b, lambda g, a, b, o: g * a)


def div(x, y):
    return _binary(
        "div", x, y, np.divide,
        lambda g, a, b, o: g / b,
        lambda g, a, b, o: -g * o / b,
    )


def neg(x):
    return _unary("neg", x, np.negative, lambda g, a, o: -g)


def exp(x):
    with np.errstate(over="ignore"):
        return _unary("exp", x, np.exp, lambda g, a, o: g * o)


def log(x):
    with np.errstate(divide="ignore", invalid="ignore"):
        return _unary("log", x, np.log, lambda g, a, o: g / a)


def sin(x):
    return _unary("sin", x, np.sin, lambda g, a, o: g * np.cos(a))


def sqrt(x):
    # derivative at 0 is taken as 0 (subgradient), used only by the p=1 cost
    def vjp(g, a, o):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(o > 0, g * 0.5 / np.where(o > 0, o, 1.0), 0.0)

    with np.errstate(invalid="ignore"):
        return _unary("sqrt", x, np.sqrt, vjp)


def relu(x):
    return _unary("relu", x, lambda a: np.maximum(a, 0.0), lambda g, a, o: g * (a > 0))


# -- linear algebra / shape --------------------------------------------------

def matmul(x, y):
    a, b = value(x), value(y)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a @ b
    tape = _tape_of(x, y)
    if tape is None:
        return out

    def vjp(g):
        return (g @ b.T if isinstance(x, Var) else None, a.T @ g if isinstance(y, Var) else None)

    return tape._push("matmul", (x, y), out, vjp)


def transpose(x):
    return _unary("transpose", x, lambda a: a.T, lambda g, a, o: g.T)


def reshape(x, shape):
    a = value(x)
    try:
        out = a.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}") from None
    if not isinstance(x, Var):
        return out
    return x.tape._push("reshape", (x,), out, lambda g: (g.reshape(a.shape),))


def broadcast_to(x, shape):
    a = value(x)
    try:
        out = np.broadcast_to(a, shape)
    except ValueError:
        raise ShapeError(f"broadcast: cannot broadcast {a.shape} to {tuple(shape)}") from None
    if not isinstance(x, Var):
        return out
    return x.tape._push("broadcast", (x,), np.array(out), lambda g: (_unbroadcast(g, a.shape),))


def take(x, idx):
    """Basic or fancy indexing (slice / gather)."""
    a = value(x)
    try:
        out = a[idx]
    except IndexError as e:
        raise ShapeError(f"slice: {e} for shape {a.shape}") from None
    if not isinstance(x, Var):
        return out

    def vjp(g):
        full = np.zeros(a.shape)
        np.add.at(full, idx, g)
        return (full,)

    return x.tape._push("slice", (x,), np.array(out, dtype=np.float64), vjp)


# -- reductions --------------------------------------------------------------

def _expand(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum(x, axis=None, keepdims: bool = False):  # noqa: A001 - mirrors numpy
    a = value(x)
    return _unary(
        "sum", x, lambda a: np.sum(a, axis=axis, keepdims=keepdims),
        lambda g, a, o: _expand(g, a.shape, axis, keepdims).copy(),
    )


def mean(x, axis=None, keepdims: bool = False):
    a = value(x)
    n = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return _unary(
        "mean", x, lambda a: np.mean(a, axis=axis, keepdims=keepdims),
        lambda g, a, o: _expand(g, a.shape, axis, keepdims) / n,
    )


def max(x, axis=None, keepdims: bool = False):  # noqa: A001
    def vjp(g, a, o):
        ok = o if (keepdims or axis is None) else np.expand_dims(o, axis)
        mask = (a == ok).astype(np.float64)
        mask /= mask.sum(axis=axis, keepdims=True)
        return _expand(g, a.shape, axis, keepdims) * mask

    return _unary("max", x, lambda a: np.max(a, axis=axis, keepdims=keepdims), vjp)


# exp of arguments below this is treated as exp(EXP_FLOOR) ~ 1e-304, which is
# negligible next to the max term and avoids slow subnormal arithmetic
EXP_FLOOR = -700.0


def logsumexp(x, axis=None, keepdims: bool = False):
    """Stable log(sum(exp(x))); its gradient is the softmax along ``axis``."""

    def fwd(a):
        m = np.max(a, axis=axis, keepdims=True)
        s = np.log(np.sum(np.exp(np.maximum(a - m, EXP_FLOOR)), axis=axis, keepdims=True)) + m
        return s if keepdims else (np.squeeze(s, axis=axis) if axis is not None else s.reshape(()))

    def vjp(g, a, o):
        ok = o if (keepdims or axis is None) else np.expand_dims(o, axis)
        return _expand(g, a.shape, axis, keepdims) * np.exp(np.maximum(a - ok, EXP_FLOOR))

    return _unary("logsumexp", x, fwd, vjp)


def softmax(x, axis=-1):
    """Composite: exp(x - logsumexp(x))."""
    return exp(sub(x, logsumexp(x, axis=axis, keepdims=True)))


PRIMITIVES: dict[str, Callable] = {
    "add": add, "sub": sub, "mul": mul, "div": div, "neg": neg,
    "exp": exp, "log": log, "sin": sin, "sqrt": sqrt, "relu": relu,
    "matmul": matmul, "transpose": transpose, "reshape": reshape,
    "broadcast": broadcast_to, "slice": take,
    "sum": sum, "mean": mean, "max": max, "logsumexp": logsumexp,
}


# -- gradient checking -------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    per_leaf: dict[str, float] = field(default_factory=dict)
    tol: float = 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """|a - b| / max(|a|, |b|, floor), elementwise."""
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def grad_check(f: Callable, leaves: dict[str, np.ndarray], step: float = 1e-5,
               tol: float = 1e-6, floor: float = 1e-6) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f(**leaves)`` to central differences.

    ``f`` receives keyword arguments (Vars on the first call, plain arrays on
    the finite-difference calls) and must return a scalar.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = {k: np.array(v, dtype=np.float64) for k, v in leaves.items()}
    tape = Tape()
    vars_ = {k: tape.param(v, name=k) for k, v in base.items()}
    out = f(**vars_)
    if not np.all(np.isfinite(value(out))):
        raise NonFiniteError("f returned a non-finite value")
    grads = tape.backward(out)

    report = GradCheckReport(0.0, tol=tol)
    for k, v in vars_.items():
        fd = np.zeros(v.shape)
        flat = base[k].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            vals = []
            for s in (step, -step):
                flat[i] = orig + s
                r = float(value(f(**base)))
                if not np.isfinite(r):
                    raise NonFiniteError(f"f returned a non-finite value at {k}[{i}]")
                vals.append(r)
            flat[i] = orig
            fd.reshape(-1)[i] = (vals[0] - vals[1]) / (2 * step)
        err = float(rel_error(grads[v], fd, floor).max()) if fd.size else 0.0
        report.per_leaf[k] = err
        report.max_rel_error = np.maximum(report.max_rel_error, err)
    report.max_rel_error = float(report.max_rel_error)
    return report
