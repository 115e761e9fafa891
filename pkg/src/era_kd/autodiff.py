"""Tape-based reverse-mode automatic differentiation over float64 arrays.

Operations record themselves on the tape that is active in the current
context (see :class:`Tape`).  Outside any tape, operations are plain numpy
evaluations and their outputs carry no gradient history.

There is no implicit broadcasting: binary elementwise ops require identical
shapes, and the only shape-changing helpers are the explicit reductions and
the fused ``linear``/``batch_norm`` layers.
"""
from __future__ import annotations

import contextlib
import contextvars
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import (
    ContractError,
    DimensionError,
    NumericError,
    ParameterError,
    TapeStateError,
)

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "era_active_tape", default=None
)


class Tensor:
    """Dense float64 array with a same-shape gradient buffer.

    The buffer is allocated on first access and reads as all zeros until a
    backward pass accumulates into it.
    """

    __slots__ = ("values", "_grad", "requires_grad", "node_id", "name")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        arr = np.array(values, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NumericError(f"non-finite values in tensor {name or ''}".strip())
        self._init(arr, requires_grad, name)

    def _init(self, arr, requires_grad, name):
        self.values = arr
        self._grad = None
        self.requires_grad = requires_grad
        self.node_id = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, op: str) -> "Tensor":
        # a finite sum implies finite entries; only scan when it is not
        if not math.isfinite(arr.sum()) and not np.isfinite(arr).all():
            raise NumericError(f"{op} produced non-finite values")
        out = cls.__new__(cls)
        out._init(arr, False, None)
        return out

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.values)
        return self._grad

    @grad.setter
    def grad(self, value) -> None:
        self._grad = value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self._grad is not None:
            self._grad.fill(0.0)

    def detach(self) -> "Tensor":
        return detach(self)

    def numpy(self) -> np.ndarray:
        return self.values.copy()

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


@dataclass
class _Node:
    op: str
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], None]


class Tape:
    """Ordered record of operations; consumed by a single backward pass.

    Use as a context manager to make it the active tape::

        with Tape() as tape:
            loss = mean(square(x))
        tape.backward(loss)
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False
        self._ids = itertools.count()
        self._tokens = []

    def __enter__(self) -> "Tape":
        if self.consumed:
            raise TapeStateError("tape already consumed; call reset() first")
        self._tokens.append(_ACTIVE_TAPE.set(self))
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._tokens.pop())

    def __len__(self):
        return len(self.nodes)

    def record(self, op: str, out: Tensor, inputs: Sequence[Tensor],
               backward: Callable[[np.ndarray], None]) -> None:
        if self.consumed:
            raise TapeStateError("cannot record on a consumed tape")
        out.requires_grad = True
        out.node_id = next(self._ids)
        self.nodes.append(_Node(op, out, tuple(inputs), backward))

    def backward(self, loss: Tensor) -> None:
        if loss.values.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self.consumed:
            raise TapeStateError("tape already consumed by a backward pass")
        self.consumed = True
        loss.grad += 1.0
        for node in reversed(self.nodes):
            node.backward(node.out.grad)

    def reset(self) -> None:
        self.nodes.clear()
        self.consumed = False


def backward(loss: Tensor, tape: Tape) -> None:
    tape.backward(loss)


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


@contextlib.contextmanager
def no_tape():
    """Evaluate without recording, even inside an active tape."""
    token = _ACTIVE_TAPE.set(None)
    try:
        yield
    finally:
        _ACTIVE_TAPE.reset(token)


def record(op: str, values: np.ndarray, inputs: Sequence[Tensor],
           backward_fn: Callable[[Tensor, np.ndarray], None]) -> Tensor:
    """Wrap ``values`` as the output of ``op`` and record it if needed.

    ``backward_fn(out, g)`` must accumulate into the ``.grad`` of every input
    that has ``requires_grad`` set.  Exposed so callers can define extra ops.
    """
    out = Tensor._wrap(values, op)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(op, out, inputs, lambda g: backward_fn(out, g))
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- primitives

def detach(a: Tensor) -> Tensor:
    return Tensor._wrap(a.values.copy(), "detach")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(out, g):
        if a.requires_grad:
            a.grad += g @ b.values.T
        if b.requires_grad:
            b.grad += a.values.T @ g

    return record("matmul", a.values @ b.values, (a, b), bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)

    def bw(out, g):
        if a.requires_grad:
            a.grad += g
        if b.requires_grad:
            b.grad += g

    return record("add", a.values + b.values, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)

    def bw(out, g):
        if a.requires_grad:
            a.grad += g
        if b.requires_grad:
            b.grad -= g

    return record("sub", a.values - b.values, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)

    def bw(out, g):
        if a.requires_grad:
            a.grad += g * b.values
        if b.requires_grad:
            b.grad += g * a.values

    return record("mul", a.values * b.values, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bw(out, g):
        if a.requires_grad:
            a.grad += c * g

    with np.errstate(over="ignore"):
        return record("scale", c * a.values, (a,), bw)


def relu(a: Tensor) -> Tensor:
    mask = a.values > 0

    def bw(out, g):
        if a.requires_grad:
            a.grad += g * mask

    return record("relu", np.where(mask, a.values, 0.0), (a,), bw)


def square(a: Tensor) -> Tensor:
    def bw(out, g):
        if a.requires_grad:
            a.grad += 2.0 * a.values * g

    with np.errstate(over="ignore"):
        return record("square", a.values * a.values, (a,), bw)


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    def bw(out, g):
        if a.requires_grad:
            a.grad += g

    return record("sum", np.asarray(a.values.sum()), (a,), bw)


def mean(a: Tensor) -> Tensor:
    n = a.values.size

    def bw(out, g):
        if a.requires_grad:
            a.grad += g / n

    return record("mean", np.asarray(a.values.mean()), (a,), bw)


def log(a: Tensor, floor: float | None = None) -> Tensor:
    """Natural log; with ``floor`` the input is clamped from below first."""
    x = a.values
    if floor is not None:
        live = x > floor
        x = np.where(live, x, floor)
    elif (x <= 0).any():
        raise NumericError("log of non-positive value")

    def bw(out, g):
        if a.requires_grad:
            if floor is None:
                a.grad += g / x
            else:
                a.grad += np.where(live, g / x, 0.0)

    return record("log", np.log(x), (a,), bw)


def pick(a: Tensor, index) -> Tensor:
    """Row-wise gather: ``out[i] = a[i, index[i]]``."""
    idx = np.asarray(index, dtype=np.int64)
    if a.values.ndim != 2 or idx.shape != (a.shape[0],):
        raise DimensionError(f"pick: need [batch, M] values and batch indices, got {a.shape}, {idx.shape}")
    rows = np.arange(a.shape[0])

    def bw(out, g):
        if a.requires_grad:
            a.grad[rows, idx] += g

    return record("pick", a.values[rows, idx], (a,), bw)


def _check_temperature(T):
    if not T > 0:
        raise ParameterError(f"temperature must be > 0, got {T}")


def softmax_with_temperature(logits: Tensor, T: float = 1.0) -> Tensor:
    _check_temperature(T)
    if logits.values.ndim != 2 or logits.shape[1] < 2:
        raise DimensionError(f"softmax needs [batch, M>=2] logits, got {logits.shape}")
    z = logits.values / T
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def bw(out, g):
        if logits.requires_grad:
            logits.grad += p * (g - (g * p).sum(axis=1, keepdims=True)) / T

    return record("softmax", p, (logits,), bw)


def log_softmax_with_temperature(logits: Tensor, T: float = 1.0) -> Tensor:
    _check_temperature(T)
    if logits.values.ndim != 2 or logits.shape[1] < 2:
        raise DimensionError(f"log_softmax needs [batch, M>=2] logits, got {logits.shape}")
    z = logits.values / T
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out_vals = z - lse
    p = np.exp(out_vals)

    def bw(out, g):
        if logits.requires_grad:
            logits.grad += (g - p * g.sum(axis=1, keepdims=True)) / T

    return record("log_softmax", out_vals, (logits,), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with weight stored as [out, in]."""
    if x.values.ndim != 2 or weight.values.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
    vals = x.values @ weight.values.T
    inputs = (x, weight)
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise DimensionError(f"linear: bias {bias.shape} vs weight {weight.shape}")
        vals = vals + bias.values
        inputs = (x, weight, bias)

    def bw(out, g):
        if x.requires_grad:
            x.grad += g @ weight.values
        if weight.requires_grad:
            weight.grad += g.T @ x.values
        if bias is not None and bias.requires_grad:
            bias.grad += g.sum(axis=0)

    with np.errstate(over="ignore", invalid="ignore"):
        return record("linear", vals, inputs, bw)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float):
    """Training-mode batch norm over axis 0.

    Returns ``(out, batch_mean, batch_var)``; the statistics are plain arrays
    (biased variance) for the caller's running averages.
    """
    if x.values.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(f"batch_norm: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    mu = x.values.mean(axis=0)
    xc = x.values - mu
    var = (xc * xc).mean(axis=0)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(out, g):
        if gamma.requires_grad:
            gamma.grad += (g * xhat).sum(axis=0)
        if beta.requires_grad:
            beta.grad += g.sum(axis=0)
        if x.requires_grad:
            gx = g * gamma.values
            x.grad += inv * (gx - gx.mean(axis=0) - xhat * (gx * xhat).mean(axis=0))

    out = record("batch_norm", xhat * gamma.values + beta.values, (x, gamma, beta), bw)
    return out, mu, var


def batch_norm_eval(x: Tensor, mean_: np.ndarray, var: np.ndarray,
                    gamma: Tensor, beta: Tensor, eps: float) -> Tensor:
    """Eval-mode batch norm using fixed statistics."""
    if x.values.ndim != 2 or gamma.shape != (x.shape[1],):
        raise DimensionError(f"batch_norm_eval: input {x.shape}, gamma {gamma.shape}")
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.values - mean_) * inv

    def bw(out, g):
        if gamma.requires_grad:
            gamma.grad += (g * xhat).sum(axis=0)
        if beta.requires_grad:
            beta.grad += g.sum(axis=0)
        if x.requires_grad:
            x.grad += g * (gamma.values * inv)

    return record("batch_norm_eval", xhat * gamma.values + beta.values, (x, gamma, beta), bw)


# ------------------------------------------------------------ gradient check

@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    eps: float
    per_input: list[float] = field(default_factory=list)
    worst: tuple[int, tuple[int, ...]] | None = None

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-5) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def check_gradients(f: Callable[..., Tensor], x, eps: float = 1e-5, tol: float = 1e-4,
                    floor: float = 1e-5) -> GradCheckReport:
    """Compare tape gradients of scalar ``f`` with central differences.

    ``x`` is a Tensor or a sequence of Tensors passed positionally to ``f``.
    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor * s)``
    with ``s = max(1, |f(x)|)``: rounding noise in the difference quotient
    grows with the size of ``f``, so coordinates whose true gradient is zero
    are judged against that noise level.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ParameterError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    xs = [x] if isinstance(x, Tensor) else list(x)
    leaves = [Tensor(t.values, requires_grad=True) for t in xs]
    with Tape() as tape:
        out = f(*leaves)
    if out.values.size != 1:
        raise ContractError(f"check_gradients needs scalar f, got shape {out.shape}")
    tape.backward(out)

    report = GradCheckReport(0.0, tol, eps)
    for i, leaf in enumerate(leaves):
        base = [Tensor._wrap(t.values, "const") for t in leaves]
        numeric = np.zeros_like(leaf.values)
        for idx in np.ndindex(*leaf.shape):
            vals = []
            for sign in (1.0, -1.0):
                pert = leaf.values.copy()
                pert[idx] += sign * eps
                args = list(base)
                try:
                    args[i] = Tensor(pert)
                    vals.append(f(*args).item())
                except NumericError as exc:
                    raise NumericError(
                        f"non-finite value while perturbing input {i} at {idx} by {sign * eps:+g}: {exc}"
                    ) from exc
            numeric[idx] = (vals[0] - vals[1]) / (2.0 * eps)
        err = relative_error(leaf.grad, numeric, floor * max(1.0, abs(out.item())))
        worst = float(err.max()) if err.size else 0.0
        report.per_input.append(worst)
        if err.size and worst >= report.max_rel_error:
            report.max_rel_error = worst
            report.worst = (i, tuple(int(v) for v in np.unravel_index(int(err.argmax()), err.shape)))
    return report
