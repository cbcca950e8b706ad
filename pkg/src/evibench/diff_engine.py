"""Reverse-mode automatic differentiation over float64 numpy arrays.

The engine records a computation graph of `Var` nodes as ordinary arithmetic
runs, then walks it backwards from a scalar output.  The primitive set is
exactly what the loss heads need: affine maps, relu/tanh, softplus, exp,
log, sigmoid, lgamma, digamma, an upper clamp, and axis reductions.  Every
primitive validates its output, so a non-finite intermediate surfaces as an
`EvaluationError` naming the operation instead of propagating NaNs.

A graph is single-threaded; distinct graphs may be built and differentiated
concurrently.  `ParamSet` instances are read-only and safe to share.
"""

from __future__ import annotations

from collections.abc import Callable, Iterator, Mapping
from dataclasses import dataclass

import numpy as np
from scipy import special as sps

from .errors import DomainError, EvaluationError, ShapeError

__all__ = [
    "Var",
    "ParamSet",
    "GradReport",
    "value_and_grad",
    "check_gradients",
    "relu",
    "tanh",
    "softplus",
    "sigmoid",
    "exp",
    "log",
    "lgamma",
    "digamma",
    "clip_max",
    "vsum",
    "vmean",
]


class ParamSet(Mapping):
    """Named, immutable float64 arrays holding a model's weights and biases."""

    def __init__(self, arrays: Mapping[str, np.ndarray]):
        if not arrays:
            raise ShapeError("a ParamSet needs at least one array")
        items: dict[str, np.ndarray] = {}
        for name, arr in arrays.items():
            a = np.array(arr, dtype=np.float64)
            if not np.all(np.isfinite(a)):
                raise DomainError(f"parameter '{name}' contains non-finite entries")
            a.setflags(write=False)
            items[str(name)] = a
        self._arrays = items

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    @property
    def total_count(self) -> int:
        return sum(a.size for a in self._arrays.values())

    def shapes(self) -> dict[str, tuple]:
        return {name: a.shape for name, a in self._arrays.items()}

    def to_vector(self) -> np.ndarray:
        """Concatenate all arrays, in insertion order, into one flat vector."""
        return np.concatenate([a.ravel() for a in self._arrays.values()])

    def with_vector(self, vec: np.ndarray) -> "ParamSet":
        """Rebuild a ParamSet of identical shapes from a flat vector."""
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.total_count,):
            raise ShapeError(
                f"vector length {vec.shape} does not match {self.total_count} parameters"
            )
        out, offset = {}, 0
        for name, a in self._arrays.items():
            out[name] = vec[offset : offset + a.size].reshape(a.shape)
            offset += a.size
        return ParamSet(out)

    def __repr__(self) -> str:
        inner = ", ".join(f"{n}:{a.shape}" for n, a in self._arrays.items())
        return f"ParamSet({inner})"


@dataclass(frozen=True)
class GradReport:
    """Outcome of a finite-difference audit of the reverse-mode gradients."""

    per_param: dict
    max_rel_error: float
    worst_param: str
    checked_coords: int


def _checked(value: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(value)):
        raise EvaluationError(op)
    return value


def _compute(op: str, fn) -> np.ndarray:
    # The finite check below is the error mechanism; numpy's own warnings
    # for overflow/division would just duplicate it as console noise.
    with np.errstate(all="ignore"):
        return _checked(np.asarray(fn(), dtype=np.float64), op)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Var:
    """One node in the recorded computation graph.

    Wraps a float64 array plus the closure that routes gradients to its
    parents.  Setting ``__array_ufunc__ = None`` makes numpy defer mixed
    expressions like ``ndarray * Var`` to our reflected operators.
    """

    __array_ufunc__ = None
    __slots__ = ("value", "grad", "_parents", "_backward")

    def __init__(self, value, _parents: tuple = ()):
        self.value = _checked(np.asarray(value, dtype=np.float64), "leaf")
        self.grad = None
        self._parents = _parents
        self._backward: Callable[[], None] = lambda: None

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def item(self) -> float:
        return float(self.value.item())

    def _accumulate(self, g: np.ndarray) -> None:
        self.grad = g if self.grad is None else self.grad + g

    # -- graph traversal ---------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(node) into every node reachable from here."""
        if self.value.size != 1:
            raise ShapeError("backward requires a scalar output")
        topo: list[Var] = []
        seen: set = set()
        stack: list[tuple[Var, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.value)
        for node in reversed(topo):
            node._backward()

    # -- arithmetic --------------------------------------------------------

    def __add__(self, other):
        other = _lift(other)
        out = Var(_compute("add", lambda: self.value + other.value), (self, other))

        def back():
            self._accumulate(_unbroadcast(out.grad, self.shape))
            other._accumulate(_unbroadcast(out.grad, other.shape))

        out._backward = back
        return out

    __radd__ = __add__

    def __mul__(self, other):
        other = _lift(other)
        out = Var(_compute("mul", lambda: self.value * other.value), (self, other))

        def back():
            self._accumulate(_unbroadcast(out.grad * other.value, self.shape))
            other._accumulate(_unbroadcast(out.grad * self.value, other.shape))

        out._backward = back
        return out

    __rmul__ = __mul__

    def __neg__(self):
        return self * (-1.0)

    def __sub__(self, other):
        return self + (-_lift(other))

    def __rsub__(self, other):
        return _lift(other) + (-self)

    def __truediv__(self, other):
        other = _lift(other)
        out = Var(_compute("div", lambda: self.value / other.value), (self, other))

        def back():
            self._accumulate(_unbroadcast(out.grad / other.value, self.shape))
            other._accumulate(
                _unbroadcast(-out.grad * self.value / other.value**2, other.shape)
            )

        out._backward = back
        return out

    def __rtruediv__(self, other):
        return _lift(other) / self

    def __pow__(self, n):
        if not isinstance(n, (int, float)):
            raise DomainError("only constant scalar exponents are supported")
        out = Var(_compute("pow", lambda: self.value**n), (self,))

        def back():
            self._accumulate(out.grad * n * self.value ** (n - 1))

        out._backward = back
        return out

    def __matmul__(self, other):
        other = _lift(other)
        if self.value.ndim != 2 or other.value.ndim != 2:
            raise ShapeError("matmul expects 2-D operands")
        out = Var(_compute("matmul", lambda: self.value @ other.value), (self, other))

        def back():
            self._accumulate(out.grad @ other.value.T)
            other._accumulate(self.value.T @ out.grad)

        out._backward = back
        return out

    def __rmatmul__(self, other):
        return _lift(other) @ self

    def __repr__(self) -> str:
        return f"Var(shape={self.shape})"


def _lift(x) -> Var:
    return x if isinstance(x, Var) else Var(np.asarray(x, dtype=np.float64))


def _unary(x, fn, dfn, op: str, domain=None) -> Var:
    x = _lift(x)
    if domain is not None and not domain(x.value):
        raise EvaluationError(op, "argument outside domain")
    out = Var(_compute(op, lambda: fn(x.value)), (x,))

    def back():
        x._accumulate(out.grad * dfn(x.value, out.value))

    out._backward = back
    return out


def relu(x) -> Var:
    return _unary(x, lambda v: np.maximum(v, 0.0), lambda v, o: (v > 0.0) * 1.0, "relu")


def tanh(x) -> Var:
    return _unary(x, np.tanh, lambda v, o: 1.0 - o**2, "tanh")


def softplus(x) -> Var:
    # log(1 + e^v) computed as max(v, 0) + log1p(e^-|v|) to avoid overflow.
    return _unary(
        x,
        lambda v: np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v))),
        lambda v, o: sps.expit(v),
        "softplus",
    )


def sigmoid(x) -> Var:
    return _unary(x, sps.expit, lambda v, o: o * (1.0 - o), "sigmoid")


def exp(x) -> Var:
    return _unary(x, np.exp, lambda v, o: o, "exp")


def log(x) -> Var:
    return _unary(
        x, np.log, lambda v, o: 1.0 / v, "log", domain=lambda v: np.all(v > 0.0)
    )


def lgamma(x) -> Var:
    return _unary(
        x, sps.gammaln, lambda v, o: sps.psi(v), "lgamma", domain=lambda v: np.all(v > 0.0)
    )


def digamma(x) -> Var:
    # Registered with its analytic derivative (the trigamma function).
    return _unary(
        x,
        sps.psi,
        lambda v, o: sps.polygamma(1, v),
        "digamma",
        domain=lambda v: np.all(v > 0.0),
    )


def clip_max(x, cap: float) -> Var:
    """Elementwise min(x, cap); gradient passes through where x <= cap."""
    cap = float(cap)
    return _unary(
        x, lambda v: np.minimum(v, cap), lambda v, o: (v <= cap) * 1.0, "clip_max"
    )


def _reduction(x, np_fn, scale_fn, op: str, axis, keepdims) -> Var:
    x = _lift(x)
    out = Var(_compute(op, lambda: np_fn(x.value, axis=axis, keepdims=keepdims)), (x,))

    def back():
        g = out.grad
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        if not keepdims and axis is None:
            g = np.reshape(g, (1,) * x.value.ndim)
        x._accumulate(np.broadcast_to(g, x.shape) * scale_fn(x.value))

    out._backward = back
    return out


def vsum(x, axis=None, keepdims: bool = False) -> Var:
    return _reduction(x, np.sum, lambda v: 1.0, "sum", axis, keepdims)


def vmean(x, axis=None, keepdims: bool = False) -> Var:
    def scale(v):
        if axis is None:
            return 1.0 / v.size
        return 1.0 / v.shape[axis]

    return _reduction(x, np.mean, scale, "mean", axis, keepdims)


def _scalar_value(out) -> float:
    v = out.value if isinstance(out, Var) else np.asarray(out, dtype=np.float64)
    if v.size != 1:
        raise ShapeError(f"loss function must return a scalar, got shape {v.shape}")
    return float(v.item())


def value_and_grad(loss_fn, params: ParamSet):
    """Evaluate a scalar loss and its gradient with respect to every parameter.

    ``loss_fn`` receives a mapping from parameter name to `Var` and must
    build its result from registered primitives.  Returns the loss as a
    float and a `ParamSet` of gradients with matching names and shapes;
    parameters the loss never touches get zero gradients.
    """
    leaves = {name: Var(arr) for name, arr in params.items()}
    out = loss_fn(leaves)
    if not isinstance(out, Var):
        raise ShapeError("loss function must return a Var")
    if out.value.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {out.shape}")
    out.backward()
    grads = {
        name: (v.grad if v.grad is not None else np.zeros_like(v.value))
        for name, v in leaves.items()
    }
    return float(out.value.item()), ParamSet(grads)


def check_gradients(
    loss_fn,
    params: ParamSet,
    h: float = 1e-4,
    max_coords: int = 10_000,
    sample_seed: int = 0,
) -> GradReport:
    """Audit reverse-mode gradients against central finite differences.

    Every coordinate is checked when the model is small; above
    ``max_coords`` total parameters a seeded random subsample of that size
    is used instead.  Relative error per coordinate is
    |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|).
    """
    if not (1e-6 <= h <= 1e-3):
        raise DomainError(f"step size h must lie in [1e-6, 1e-3], got {h}")
    _, grads = value_and_grad(loss_fn, params)
    g_flat = grads.to_vector()
    base = params.to_vector()
    n = base.size
    if n > max_coords:
        rng = np.random.default_rng(sample_seed)
        coords = np.sort(rng.choice(n, size=max_coords, replace=False))
    else:
        coords = np.arange(n)

    # Map flat coordinates back to their owning parameter array.
    bounds, offset = [], 0
    for name, arr in params.items():
        bounds.append((offset, offset + arr.size, name))
        offset += arr.size

    def owner(i: int) -> str:
        for lo, hi, name in bounds:
            if lo <= i < hi:
                return name
        raise IndexError(i)

    per_param = {name: 0.0 for name in params}
    for i in coords:
        vec = base.copy()
        vec[i] = base[i] + h
        f_plus = _scalar_value(loss_fn(dict(params.with_vector(vec))))
        vec[i] = base[i] - h
        f_minus = _scalar_value(loss_fn(dict(params.with_vector(vec))))
        g_fd = (f_plus - f_minus) / (2.0 * h)
        g_ad = g_flat[i]
        rel = abs(g_ad - g_fd) / max(1e-8, abs(g_ad) + abs(g_fd))
        name = owner(int(i))
        if rel > per_param[name]:
            per_param[name] = rel
    worst = max(per_param, key=per_param.get)
    return GradReport(
        per_param=per_param,
        max_rel_error=per_param[worst],
        worst_param=worst,
        checked_coords=int(len(coords)),
    )
