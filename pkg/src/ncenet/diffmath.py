"""Double-precision reverse-mode differentiation over 2-D matrices.

Every loss in the package is composed from the primitives defined here.
A computation is an ordinary Python function over :class:`Tensor` values;
while a :class:`GradTape` is active each primitive application is
recorded, and :meth:`GradTape.gradient` walks the record backwards.

>>> value, (grad,) = value_and_gradient(lambda x: sum_all(x * x), [np.array([[3.0]])])
>>> value, grad
(9.0, array([[6.]]))
"""
from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .exceptions import InvalidConfig, InvalidTemperature, NonScalarOutput, ShapeMismatch, ZeroRowError

NORM_EPS = 1e-12
LOG_CLAMP = 1e-12

_active_tape: contextvars.ContextVar["GradTape | None"] = contextvars.ContextVar(
    "ncenet_active_tape", default=None
)
# name -> multiplicative factor applied to that primitive's adjoints (test hook)
_corruptions: contextvars.ContextVar[dict] = contextvars.ContextVar("ncenet_corruptions", default={})

PRIMITIVES = frozenset({
    "add", "sub", "mul", "scale", "matmul", "transpose", "square", "gelu", "log",
    "sum_all", "sum_rows", "l2_normalize_rows", "softmax_rows", "log_softmax_rows",
})


class Tensor:
    """A 2-D float64 matrix that may participate in gradient recording."""

    __slots__ = ("value", "parents", "vjp", "op", "requires_grad", "recompute")

    def __init__(self, value, parents=(), vjp=None, op="leaf", requires_grad=False):
        value = np.asarray(value, dtype=np.float64)
        if value.ndim == 0:
            value = value.reshape(1, 1)
        elif value.ndim == 1:
            value = value.reshape(1, -1)
        elif value.ndim != 2:
            raise ShapeMismatch(f"expected a 2-D matrix, got shape {value.shape}")
        self.value = value
        self.parents = tuple(parents)
        self.vjp = vjp
        self.op = op
        self.requires_grad = requires_grad
        self.recompute = None

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        if self.value.size != 1:
            raise NonScalarOutput(f"tensor of shape {self.shape} is not a scalar")
        return float(self.value[0, 0])

    def numpy(self) -> np.ndarray:
        return self.value.copy()

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.shape})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not a registered primitive")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class GradTape:
    """Records primitive applications in evaluation order.

    A tape is single-use: enter it once, run the computation, then ask for
    gradients.
    """

    nodes: list = field(default_factory=list)
    _token: object = None

    def __enter__(self):
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc):
        _active_tape.reset(self._token)
        return False

    def record(self, node: Tensor) -> None:
        self.nodes.append(node)

    def watch(self, value) -> Tensor:
        leaf = Tensor(value, requires_grad=True)
        self.nodes.append(leaf)
        return leaf

    def replay(self) -> Tensor:
        """Re-evaluate the recorded primitives; returns the final node's recomputation."""
        fresh = {}
        out = None
        token = _active_tape.set(None)
        try:
            for node in self.nodes:
                if node.recompute is None:
                    out = fresh[id(node)] = node
                    continue
                out = node.recompute(*[fresh.get(id(p), p) for p in node.parents])
                fresh[id(node)] = out
        finally:
            _active_tape.reset(token)
        return out

    def gradient(self, output: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        if output.value.size != 1:
            raise NonScalarOutput(f"output of shape {output.shape} is not a scalar")
        adjoints = {id(output): np.ones_like(output.value)}
        for node in reversed(self.nodes):
            g = adjoints.get(id(node))
            if g is None or node.vjp is None:
                continue
            factor = _corruptions.get().get(node.op)
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if factor is not None:
                    pg = pg * factor
                key = id(parent)
                adjoints[key] = adjoints[key] + pg if key in adjoints else pg
        return [adjoints.get(id(w), np.zeros_like(w.value)) for w in wrt]


def _emit(op, value, parents, vjp, recompute) -> Tensor:
    parents = tuple(parents)
    requires = any(p.requires_grad for p in parents)
    out = Tensor(value, parents, vjp if requires else None, op, requires)
    out.recompute = recompute
    tape = _active_tape.get()
    if tape is not None and requires:
        tape.record(out)
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == shape:
        return grad
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    return grad.sum(axis=axes, keepdims=True)


# --- elementwise and linear algebra -------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit(
        "add",
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        add,
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit(
        "sub",
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        sub,
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit(
        "mul",
        a.value * b.value,
        (a, b),
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
        mul,
    )


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _emit("scale", a.value * c, (a,), lambda g: (g * c,), lambda x: scale(x, c))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"cannot multiply {a.shape} by {b.shape}")
    return _emit(
        "matmul",
        a.value @ b.value,
        (a, b),
        lambda g: (g @ b.value.T, a.value.T @ g),
        matmul,
    )


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _emit("transpose", a.value.T, (a,), lambda g: (g.T,), transpose)


def square(a) -> Tensor:
    a = as_tensor(a)
    return _emit("square", a.value * a.value, (a,), lambda g: (2.0 * g * a.value,), square)


_SQRT_2_OVER_PI = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """Tanh-approximated GELU."""
    a = as_tensor(a)
    x = a.value
    t = np.tanh(_SQRT_2_OVER_PI * (x + 0.044715 * x**3))

    def vjp(g):
        dinner = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _emit("gelu", 0.5 * x * (1.0 + t), (a,), vjp, gelu)


def log(a, clamp: float = LOG_CLAMP) -> Tensor:
    """Natural log with inputs clamped below at ``clamp``; clamped entries get zero gradient."""
    a = as_tensor(a)
    x = a.value
    safe = np.maximum(x, clamp)
    return _emit(
        "log",
        np.log(safe),
        (a,),
        lambda g: (np.where(x > clamp, g / safe, 0.0),),
        lambda y: log(y, clamp),
    )


def stop_gradient(a) -> Tensor:
    """Same values, detached from any recorded history."""
    return Tensor(as_tensor(a).value, op="stop_gradient")


# --- reductions ------------------------------------------------------------------------


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    return _emit("sum_all", a.value.sum(), (a,), lambda g: (np.full(a.shape, g[0, 0]),), sum_all)


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    return scale(sum_all(a), 1.0 / a.value.size)


def sum_rows(a) -> Tensor:
    """Row sums as a column vector."""
    a = as_tensor(a)
    return _emit(
        "sum_rows",
        a.value.sum(axis=1, keepdims=True),
        (a,),
        lambda g: (np.broadcast_to(g, a.shape).copy(),),
        sum_rows,
    )


# --- row-wise normalizations -------------------------------------------------------------


def l2_normalize_rows(m) -> Tensor:
    m = as_tensor(m)
    x = m.value
    norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
    if np.any(norms <= NORM_EPS):
        bad = int(np.argmax(norms.ravel() <= NORM_EPS))
        raise ZeroRowError(f"row {bad} has norm {float(norms[bad, 0]):.3g} <= {NORM_EPS}")
    y = x / norms

    def vjp(g):
        return ((g - y * (g * y).sum(axis=1, keepdims=True)) / norms,)

    return _emit("l2_normalize_rows", y, (m,), vjp, l2_normalize_rows)


def _check_temperature(temperature: float) -> float:
    temperature = float(temperature)
    if not temperature > 0:
        raise InvalidTemperature(f"temperature must be > 0, got {temperature}")
    return temperature


def softmax_rows(logits, temperature: float = 1.0) -> Tensor:
    logits = as_tensor(logits)
    tau = _check_temperature(temperature)
    s = logits.value / tau
    s = s - s.max(axis=1, keepdims=True)
    e = np.exp(s)
    p = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)) / tau,)

    return _emit("softmax_rows", p, (logits,), vjp, lambda x: softmax_rows(x, tau))


def log_softmax_rows(logits, temperature: float = 1.0, mask=None) -> Tensor:
    """Row-wise log-softmax of ``logits / temperature``.

    Entries where ``mask`` is False are excluded from the normalizer and
    come out as 0 with no gradient.
    """
    logits = as_tensor(logits)
    tau = _check_temperature(temperature)
    s = logits.value / tau
    if mask is None:
        keep = np.ones(s.shape, dtype=bool)
    else:
        keep = np.broadcast_to(np.asarray(mask, dtype=bool), s.shape)
        if not keep.any(axis=1).all():
            raise ShapeMismatch("every row needs at least one unmasked entry")
    shifted = np.where(keep, s, -np.inf)
    row_max = shifted.max(axis=1, keepdims=True)
    e = np.where(keep, np.exp(shifted - row_max), 0.0)
    z = e.sum(axis=1, keepdims=True)
    out = np.where(keep, s - row_max - np.log(z), 0.0)
    p = e / z

    def vjp(g):
        g = np.where(keep, g, 0.0)
        return ((g - p * g.sum(axis=1, keepdims=True)) / tau,)

    return _emit("log_softmax_rows", out, (logits,), vjp, lambda x: log_softmax_rows(x, tau, mask))


def cosine_similarity_matrix(m) -> Tensor:
    """Pairwise cosine similarities of the rows of ``m``."""
    u = l2_normalize_rows(m)
    return matmul(u, transpose(u))


# --- drivers -------------------------------------------------------------------------------


def value_and_gradient(computation: Callable[..., Tensor], inputs: Sequence) -> tuple[float, list[np.ndarray]]:
    """Evaluate a scalar ``computation(*inputs)`` and its gradient w.r.t. every input."""
    with GradTape() as tape:
        leaves = [tape.watch(x) for x in inputs]
        out = as_tensor(computation(*leaves))
    if out.value.size != 1:
        raise NonScalarOutput(f"computation returned shape {out.shape}, expected a scalar")
    return out.item(), tape.gradient(out, leaves)


def evaluate(computation: Callable[..., Tensor], inputs: Sequence) -> float:
    out = as_tensor(computation(*[Tensor(x) for x in inputs]))
    if out.value.size != 1:
        raise NonScalarOutput(f"computation returned shape {out.shape}, expected a scalar")
    return out.item()


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_errors: tuple[float, ...]
    tolerance: float

    @property
    def max_rel_error(self) -> float:
        return max(self.max_rel_errors, default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def grad_check(computation, inputs, epsilon: float = 1e-4, tolerance: float = 1e-5) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    The per-entry error is ``|a - n| / max(1, |a|, |n|)``; the report keeps
    the worst entry of each input.
    """
    if not 0 < epsilon <= 1e-2:
        raise InvalidConfig(f"epsilon must lie in (0, 1e-2], got {epsilon}")
    if not tolerance > 0:
        raise InvalidConfig(f"tolerance must be > 0, got {tolerance}")
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    _, analytic = value_and_gradient(computation, inputs)
    errors = []
    for idx, x in enumerate(inputs):
        numeric = np.zeros_like(x)
        for pos in np.ndindex(x.shape):
            orig = x[pos]
            x[pos] = orig + epsilon
            up = evaluate(computation, inputs)
            x[pos] = orig - epsilon
            down = evaluate(computation, inputs)
            x[pos] = orig
            numeric[pos] = (up - down) / (2 * epsilon)
        a = analytic[idx].reshape(x.shape)
        denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(numeric)))
        errors.append(float((np.abs(a - numeric) / denom).max()) if x.size else 0.0)
    return GradCheckReport(tuple(errors), float(tolerance))


@contextlib.contextmanager
def corrupted_adjoint(op: str, factor: float = 1.5):
    """Test hook: scale every adjoint emitted by primitive ``op`` by ``factor``."""
    if op not in PRIMITIVES:
        raise KeyError(f"unknown primitive {op!r}")
    token = _corruptions.set({**_corruptions.get(), op: factor})
    try:
        yield
    finally:
        _corruptions.reset(token)
