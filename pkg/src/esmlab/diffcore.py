"""Dense-tensor helpers, a parameter store, Adam, and a small reverse-mode engine.

Tensors are plain numpy arrays. The autodiff engine records a tape over a fixed
op set (affine maps, elementwise nonlinearities, reductions, gathers and custom
ops with a hand-written VJP such as the splat compositor) and replays it in
reverse.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

Tensor = np.ndarray
DEFAULT_DTYPE = np.float32


class ContractError(ValueError):
    """An operation was called outside its documented preconditions."""


class NumericError(FloatingPointError):
    """A non-finite value appeared where the computation requires finite numbers."""


def tensor(data, dtype=None, checked: bool = True) -> Tensor:
    """Build a contiguous row-major array, rejecting NaN/Inf when ``checked``."""
    arr = np.ascontiguousarray(data, dtype=dtype or DEFAULT_DTYPE)
    if checked and not np.all(np.isfinite(arr)):
        raise NumericError("tensor contains non-finite values")
    return arr


def check_same_shape(a: Tensor, b: Tensor, what: str = "tensors") -> None:
    if np.shape(a) != np.shape(b):
        raise ContractError(f"shape mismatch for {what}: {np.shape(a)} vs {np.shape(b)}")


@dataclass
class ParamStore:
    """Named parameters with matching gradient buffers and optimizer moments."""

    values: dict[str, Tensor] = field(default_factory=dict)
    grads: dict[str, Tensor] = field(default_factory=dict)
    moments: dict[str, tuple[Tensor, Tensor]] = field(default_factory=dict)
    step: int = 0

    def add(self, name: str, value) -> None:
        if name in self.values:
            raise ContractError(f"duplicate parameter name {name!r}")
        value = np.array(value)
        if value.dtype.kind != "f":
            value = value.astype(DEFAULT_DTYPE)
        self.values[name] = value
        self.grads[name] = np.zeros_like(value)

    def __getitem__(self, name: str) -> Tensor:
        return self.values[name]

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def names(self) -> list[str]:
        return list(self.values)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0

    def set_grads(self, grads: Mapping[str, Tensor]) -> None:
        for name, g in grads.items():
            check_same_shape(self.values[name], g, f"gradient of {name!r}")
            self.grads[name] = np.asarray(g, dtype=self.values[name].dtype).copy()

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore()
        for name, v in self.values.items():
            out.add(name, v.astype(dtype))
        return out

    def copy(self) -> "ParamStore":
        out = ParamStore(step=self.step)
        for name, v in self.values.items():
            out.add(name, v.copy())
            out.grads[name] = self.grads[name].copy()
        for name, (m, v) in self.moments.items():
            out.moments[name] = (m.copy(), v.copy())
        return out

    def num_params(self) -> int:
        return int(sum(v.size for v in self.values.values()))


def adam_step(
    store: ParamStore,
    lr: float | Mapping[str, float],
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    step: int | None = None,
) -> ParamStore:
    """Apply one bias-corrected Adam update in place and zero the gradients.

    ``lr`` may be a mapping from parameter name to learning rate; names absent
    from the mapping are left untouched. ``step`` defaults to the store's own
    counter plus one.
    """
    for name, g in store.grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter {name!r}")
    b1, b2 = betas
    store.step = store.step + 1 if step is None else int(step)
    k = store.step
    for name, value in store.values.items():
        rate = lr.get(name) if isinstance(lr, Mapping) else lr
        g = store.grads[name]
        if rate is None:
            continue
        m, v = store.moments.get(name, (np.zeros_like(value), np.zeros_like(value)))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        store.moments[name] = (m, v)
        m_hat = m / (1.0 - b1**k)
        v_hat = v / (1.0 - b2**k)
        value -= (rate * m_hat / (np.sqrt(v_hat) + eps)).astype(value.dtype)
    store.zero_grad()
    return store


# --------------------------------------------------------------------------
# reverse-mode engine

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Var:
    """A node on the tape: a value plus how to push a cotangent to its parents."""

    __slots__ = ("value", "parents", "backward", "name")

    def __init__(self, value, parents: Sequence["Var"] = (), backward=None, name: str | None = None):
        self.value = np.asarray(value)
        self.parents = tuple(parents) if _grad_enabled else ()
        self.backward = backward if _grad_enabled else None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self):
        return f"Var(shape={self.value.shape}, name={self.name!r})"


def _wrap(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _pair(a, b) -> tuple[Var, Var]:
    """Wrap operands; bare scalars/arrays take the dtype of a Var partner."""
    if isinstance(a, Var) and not isinstance(b, Var):
        return a, Var(np.asarray(b, dtype=a.value.dtype))
    if isinstance(b, Var) and not isinstance(a, Var):
        return Var(np.asarray(a, dtype=b.value.dtype)), b
    return _wrap(a), _wrap(b)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Var:
    a, b = _pair(a, b)
    return Var(a.value + b.value, (a, b),
               lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Var:
    a, b = _pair(a, b)
    return Var(a.value - b.value, (a, b),
               lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Var:
    a, b = _pair(a, b)
    return Var(a.value * b.value, (a, b),
               lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)))


def matmul(a, b) -> Var:
    """2-D matrix product."""
    a, b = _wrap(a), _wrap(b)
    return Var(a.value @ b.value, (a, b), lambda g: (g @ b.value.T, a.value.T @ g))


def linear(x, weight, bias=None) -> Var:
    """Affine map ``x @ weight.T + bias`` with weight stored as (out, in)."""
    x, w = _wrap(x), _wrap(weight)
    out = x.value @ w.value.T
    if bias is None:
        return Var(out, (x, w), lambda g: (g @ w.value, g.T @ x.value))
    b = _wrap(bias)
    return Var(out + b.value, (x, w, b),
               lambda g: (g @ w.value, g.T @ x.value, g.sum(axis=0)))


def silu(x) -> Var:
    x = _wrap(x)
    sig = 0.5 * (1.0 + np.tanh(0.5 * x.value))
    return Var(x.value * sig, (x,), lambda g: (g * sig * (1.0 + x.value * (1.0 - sig)),))


def tanh(x) -> Var:
    x = _wrap(x)
    y = np.tanh(x.value)
    return Var(y, (x,), lambda g: (g * (1.0 - y * y),))


def square(x) -> Var:
    x = _wrap(x)
    return Var(x.value * x.value, (x,), lambda g: (2.0 * g * x.value,))


def sum_(x) -> Var:
    x = _wrap(x)
    return Var(x.value.sum(), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x) -> Var:
    x = _wrap(x)
    n = x.value.size
    return Var(x.value.mean(), (x,), lambda g: (np.broadcast_to(g / n, x.shape).copy(),))


def concat(xs: Sequence, axis: int = -1) -> Var:
    xs = [_wrap(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    return Var(np.concatenate([x.value for x in xs], axis=axis), xs,
               lambda g: tuple(np.split(g, splits, axis=axis)))


def take_rows(table, idx) -> Var:
    """Gather rows of a 2-D table; the VJP scatter-adds back into the table."""
    table = _wrap(table)
    idx = np.asarray(idx, dtype=np.int64)

    def back(g):
        out = np.zeros_like(table.value)
        np.add.at(out, idx, g)
        return (out,)

    return Var(table.value[idx], (table,), back)


def custom(inputs: Sequence, value: np.ndarray, vjp_fn: Callable[[np.ndarray], tuple]) -> Var:
    """Register an op whose VJP is supplied by hand (e.g. the splat compositor)."""
    return Var(value, [_wrap(x) for x in inputs], vjp_fn)


def backprop(output: Var, cotangent) -> dict[int, np.ndarray]:
    """Accumulate cotangents from ``output`` to every reachable node, keyed by id."""
    order: list[Var] = []
    seen: set[int] = set()
    stack = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    cot = np.asarray(cotangent, dtype=output.value.dtype)
    check_same_shape(output.value, cot, "cotangent")
    grads: dict[int, np.ndarray] = {id(output): cot}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node.backward is None:
            continue
        for p, pg in zip(node.parents, node.backward(g)):
            if pg is None:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
    return grads


def vjp(f: Callable[[Mapping[str, Var]], Var], inputs: ParamStore | Mapping[str, Tensor],
        cotangent) -> dict[str, Tensor]:
    """Vector-Jacobian product of ``f`` at ``inputs``.

    ``f`` receives a mapping name -> Var and must return a single Var. The
    result maps each input name to ``cotangent^T @ J`` (zeros for inputs the
    output does not depend on).
    """
    values = inputs.values if isinstance(inputs, ParamStore) else inputs
    leaves = {name: Var(np.asarray(v), name=name) for name, v in values.items()}
    out = f(leaves)
    grads = backprop(out, cotangent)
    return {name: grads.get(id(leaf), np.zeros_like(leaf.value)) for name, leaf in leaves.items()}


def value_and_grad(f: Callable[[Mapping[str, Var]], Var], inputs: ParamStore | Mapping[str, Tensor]):
    """Scalar ``f`` and its gradient with respect to every named input."""
    values = inputs.values if isinstance(inputs, ParamStore) else inputs
    leaves = {name: Var(np.asarray(v), name=name) for name, v in values.items()}
    out = f(leaves)
    if out.value.size != 1:
        raise ContractError("value_and_grad needs a scalar output")
    grads = backprop(out, np.ones_like(out.value))
    return float(out.value), {n: grads.get(id(l), np.zeros_like(l.value)) for n, l in leaves.items()}


def central_difference(fn: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-6,
                       indices: Iterable[int] | None = None) -> np.ndarray:
    """Central finite-difference gradient of scalar ``fn`` (flat indices optional)."""
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.zeros_like(flat)
    for i in (range(flat.size) if indices is None else indices):
        old = flat[i]
        flat[i] = old + h
        fp = fn(x)
        flat[i] = old - h
        fm = fn(x)
        flat[i] = old
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / denom)


def fingerprint(store: ParamStore | Mapping[str, Tensor]) -> str:
    """SHA-256 over names, shapes, dtypes and bytes; equal iff bit-identical."""
    import hashlib

    values = store.values if isinstance(store, ParamStore) else store
    h = hashlib.sha256()
    for name in sorted(values):
        v = np.ascontiguousarray(values[name])
        h.update(f"{name}:{v.shape}:{v.dtype}".encode())
        h.update(v.tobytes())
    return h.hexdigest()
