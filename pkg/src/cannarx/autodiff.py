"""Minimal tape-based reverse-mode differentiation.

Only the handful of batched array operations needed to train and invert
CA-NNARX models are supported. Every op also accepts plain numpy arrays, in
which case it computes the primal value and records nothing, so model code
written against this module runs unchanged with or without a tape.

Arrays carry a leading batch dimension where convenient; weight matrices are
stored as ``(out, in)`` and applied as ``x @ W.T``.
"""

from __future__ import annotations

import contextlib
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

__all__ = [
    "Var",
    "Tape",
    "UnsupportedOperationError",
    "PowerIterationState",
    "value_and_grad",
    "jacobian",
    "matvec",
    "affine",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "tanh",
    "sigmoid",
    "identity",
    "activation",
    "concat",
    "take",
    "total",
    "sq_error",
    "maximum",
    "minimum",
    "power_iteration",
    "spectral_norm",
    "spectral_norm_fwd_bwd",
    "value_of",
]


class UnsupportedOperationError(TypeError):
    """Raised when a traced value reaches an operation the tape cannot record."""


class Var:
    """A traced array living on a :class:`Tape`."""

    __slots__ = ("value", "parents", "vjp", "grad", "tape", "op", "index")

    def __init__(self, value, parents=(), vjp=None, tape=None, op="leaf"):
        self.value = np.asarray(value, dtype=float)
        self.parents = parents
        self.vjp = vjp
        self.grad = None
        self.tape = tape
        self.op = op
        self.index = -1

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        fn = _UFUNCS.get(ufunc)
        if fn is None or method != "__call__" or kwargs:
            raise UnsupportedOperationError(
                f"numpy ufunc {ufunc.__name__!r} applied to a traced value")
        return fn(*inputs)

    def __array_function__(self, func, types, args, kwargs):
        raise UnsupportedOperationError(
            f"numpy function {func.__name__!r} applied to a traced value; use the autodiff ops")

    def __array__(self, *args, **kwargs):
        raise UnsupportedOperationError("traced value cannot be converted to a plain array")

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

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return take(self, key)

    def __repr__(self):
        return f"Var(op={self.op!r}, shape={self.value.shape})"


class Tape:
    """Records operations in creation order and replays them backwards.

    ``accumulations`` counts, per leaf, how many adjoint contributions were
    summed into it during the last :meth:`backward` call.
    """

    def __init__(self):
        self.nodes: list[Var] = []
        self.leaves: list[Var] = []
        self.accumulations: dict[int, int] = {}

    def leaf(self, value) -> Var:
        v = Var(value, tape=self)
        v.index = len(self.nodes)
        self.nodes.append(v)
        self.leaves.append(v)
        return v

    def record(self, value, parents, vjp, op) -> Var:
        v = Var(value, parents, vjp, tape=self, op=op)
        v.index = len(self.nodes)
        self.nodes.append(v)
        return v

    def backward(self, out: Var, seed=None):
        for n in self.nodes:
            n.grad = None
        counts: dict[int, int] = defaultdict(int)
        out.grad = np.ones_like(out.value) if seed is None else np.asarray(seed, float)
        for node in reversed(self.nodes[: out.index + 1]):
            g = node.grad
            if g is None or node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if parent is None or pg is None:
                    continue
                if parent.grad is None:
                    parent.grad = pg
                else:
                    parent.grad = parent.grad + pg
                if parent.vjp is None:
                    counts[parent.index] += 1
        self.accumulations = dict(counts)


_ACTIVE: list[Tape] = []


@contextlib.contextmanager
def recording(tape: Tape):
    _ACTIVE.append(tape)
    try:
        yield tape
    finally:
        _ACTIVE.pop()


def _tape_of(*xs) -> Tape | None:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def value_of(x):
    return x.value if isinstance(x, Var) else x


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


def _record(value, inputs, vjp, op):
    tape = _tape_of(*inputs)
    if tape is None:
        return value
    parents = tuple(x if isinstance(x, Var) else None for x in inputs)
    return tape.record(value, parents, vjp, op)


# ---------------------------------------------------------------- linear ops


def matvec(W, x):
    """Apply matrix ``W`` (m, n) to the trailing axis of ``x`` (..., n)."""
    Wv, xv = value_of(W), value_of(x)
    if Wv.ndim != 2 or xv.shape[-1] != Wv.shape[1]:
        raise ValueError(f"matvec shape mismatch: W{Wv.shape} x{xv.shape}")
    out = xv @ Wv.T

    def vjp(g):
        g2 = g.reshape(-1, Wv.shape[0])
        return g2.T @ xv.reshape(-1, Wv.shape[1]), g @ Wv

    return _record(out, (W, x), vjp, "matvec")


def affine(W, x, b):
    """``x @ W.T + b`` as a single node."""
    Wv, xv, bv = value_of(W), value_of(x), value_of(b)
    if Wv.ndim != 2 or xv.shape[-1] != Wv.shape[1] or bv.shape != (Wv.shape[0],):
        raise ValueError(f"affine shape mismatch: W{Wv.shape} x{xv.shape} b{bv.shape}")
    out = xv @ Wv.T + bv

    def vjp(g):
        g2 = g.reshape(-1, Wv.shape[0])
        return g2.T @ xv.reshape(-1, Wv.shape[1]), g @ Wv, g2.sum(axis=0)

    return _record(out, (W, x, b), vjp, "affine")


def add(a, b):
    av, bv = value_of(a), value_of(b)
    out = av + bv
    sa, sb = np.shape(av), np.shape(bv)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    out = av - bv
    sa, sb = np.shape(av), np.shape(bv)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b):
    """Elementwise (Hadamard) product with broadcasting."""
    av, bv = value_of(a), value_of(b)
    out = av * bv
    sa, sb = np.shape(av), np.shape(bv)
    return _record(
        out, (a, b), lambda g: (_unbroadcast(g * bv, sa), _unbroadcast(g * av, sb)), "mul")


def neg(a):
    return _record(-value_of(a), (a,), lambda g: (-g,), "neg")


def scale(a, c: float):
    return _record(value_of(a) * c, (a,), lambda g: (g * c,), "scale")


# ---------------------------------------------------------------- activations


def tanh(a):
    t = np.tanh(value_of(a))
    return _record(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


def sigmoid(a):
    s = 0.5 * (1.0 + np.tanh(0.5 * value_of(a)))
    return _record(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def identity(a):
    return a


_UFUNCS = {np.add: add, np.subtract: sub, np.multiply: mul, np.negative: neg, np.tanh: tanh}

_ACTIVATIONS = {"tanh": tanh, "sigmoid": sigmoid, "identity": identity, "linear": identity}


def activation(tag: str, a):
    try:
        fn = _ACTIVATIONS[tag]
    except KeyError:
        raise UnsupportedOperationError(f"unknown activation {tag!r}") from None
    return fn(a)


# ---------------------------------------------------------------- structure


def concat(parts: Sequence, axis: int = -1):
    vals = [np.asarray(value_of(p), dtype=float) for p in parts]
    ndim = max(v.ndim for v in vals)
    lead = np.broadcast_shapes(*[v.shape[:-1] for v in vals]) if ndim > 1 else ()
    vals = [np.broadcast_to(v, lead + v.shape[-1:]) for v in vals]
    out = np.concatenate(vals, axis=axis)
    sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]
    shapes = [np.shape(value_of(p)) for p in parts]

    def vjp(g):
        pieces = np.split(g, sizes, axis=axis)
        return tuple(_unbroadcast(p, s) for p, s in zip(pieces, shapes))

    return _record(out, tuple(parts), vjp, "concat")


def take(a, key):
    """Basic (slice/int) indexing."""
    av = value_of(a)
    out = av[key]

    def vjp(g):
        full = np.zeros_like(av)
        full[key] = g
        return (full,)

    return _record(out, (a,), vjp, "take")


# ---------------------------------------------------------------- reductions


def total(a):
    """Sum of all elements."""
    av = value_of(a)
    return _record(np.sum(av), (a,), lambda g: (np.broadcast_to(g, av.shape).copy(),), "total")


def sq_error(a, b):
    """Sum of squared differences ``sum((a - b)**2)``."""
    av, bv = value_of(a), value_of(b)
    d = av - bv
    sa, sb = np.shape(av), np.shape(bv)
    return _record(
        np.sum(d * d), (a, b),
        lambda g: (_unbroadcast(2.0 * g * d, sa), _unbroadcast(-2.0 * g * d, sb)), "sq_error")


def maximum(a, c: float):
    av = value_of(a)
    mask = av > c
    return _record(np.where(mask, av, c), (a,), lambda g: (g * mask,), "maximum")


def minimum(a, c: float):
    av = value_of(a)
    mask = av < c
    return _record(np.where(mask, av, c), (a,), lambda g: (g * mask,), "minimum")


# ---------------------------------------------------------------- spectral norm


@dataclass
class PowerIterationState:
    """Persistent right-singular-vector estimate for warm-started power iteration."""

    v: np.ndarray | None = None
    converged: bool = True
    iterations: int = 0
    history: list = field(default_factory=list, repr=False)


def power_iteration(W, state: PowerIterationState | None = None, n_iter: int = 50,
                    max_iter: int | None = None, tol: float = 1e-9, seed: int = 0):
    """Largest singular value and dominant singular pair of ``W``.

    Runs exactly ``n_iter`` iterations on ``W'W`` from the stored vector (or a
    seeded random one). With ``max_iter`` set, keeps iterating past ``n_iter``
    until consecutive estimates agree to 1e-15 relative or ``max_iter`` is hit.
    The state is flagged non-converged when consecutive estimates still differ
    by more than ``tol`` at exit.
    """
    W = np.asarray(W, dtype=float)
    m, n = W.shape
    if state is None:
        state = PowerIterationState()
    max_iter = n_iter if max_iter is None else max(max_iter, n_iter)
    v = state.v
    if v is None or v.shape != (n,):
        v = np.random.default_rng(seed).standard_normal(n)
    nv = np.linalg.norm(v)
    if nv == 0.0:
        v, nv = np.ones(n), np.sqrt(n)
    v = v / nv
    WtW = W.T @ W
    sigma_sq, prev = float(v @ WtW @ v), np.inf
    it = 0
    while it < max_iter:
        w = WtW @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            sigma_sq = prev = 0.0
            break
        prev, sigma_sq = sigma_sq, float(v @ w)
        v = w / nw
        it += 1
        if it >= n_iter and abs(sigma_sq - prev) <= 1e-15 * sigma_sq:
            break
    sigma_sq = float(v @ WtW @ v)
    sigma = np.sqrt(max(sigma_sq, 0.0))
    delta = abs(np.sqrt(max(prev, 0.0)) - sigma) if np.isfinite(prev) else np.inf
    state.v = v
    state.iterations = it
    state.converged = bool(delta <= tol)
    u = W @ v
    nu = np.linalg.norm(u)
    u = u / nu if nu > 0 else np.zeros(m)
    return sigma, u, v


def spectral_norm(W, state: PowerIterationState | None = None, n_iter: int = 50):
    """Traceable largest singular value; adjoint is ``u v'``."""
    sigma, u, v = power_iteration(value_of(W), state, n_iter=n_iter)
    outer = np.outer(u, v)
    return _record(np.float64(sigma), (W,), lambda g: (g * outer,), "spectral_norm")


def spectral_norm_fwd_bwd(W, state: PowerIterationState | None = None, n_iter: int = 50):
    """Return ``(sigma_max, d sigma_max / dW)`` for a plain matrix."""
    sigma, u, v = power_iteration(W, state, n_iter=n_iter)
    return sigma, np.outer(u, v)


# ---------------------------------------------------------------- drivers


def _flatten(tree):
    if isinstance(tree, np.ndarray) or np.isscalar(tree):
        return [("", np.asarray(tree, dtype=float))], lambda leaves: leaves[0]
    if hasattr(tree, "to_arrays") and hasattr(tree, "with_arrays"):
        arrays = tree.to_arrays()
        keys = list(arrays)
        return ([(k, arrays[k]) for k in keys],
                lambda leaves: tree.with_arrays(dict(zip(keys, leaves))))
    if isinstance(tree, dict):
        keys = list(tree)
        return ([(k, np.asarray(tree[k], dtype=float)) for k in keys],
                lambda leaves: dict(zip(keys, leaves)))
    raise TypeError(f"cannot differentiate with respect to {type(tree).__name__}")


def value_and_grad(loss_fn: Callable[..., Any], params, *args, tape: Tape | None = None,
                   **kwargs):
    """Evaluate ``loss_fn(params, *args)`` and its gradient w.r.t. ``params``.

    ``params`` may be an array, a dict of arrays, or any object exposing
    ``to_arrays()``/``with_arrays()``; the gradient comes back in the same
    layout.
    """
    tape = Tape() if tape is None else tape
    leaves, rebuild = _flatten(params)
    with recording(tape):
        traced = [tape.leaf(v) for _, v in leaves]
        out = loss_fn(rebuild(traced), *args, **kwargs)
    if isinstance(out, Var):
        if out.value.size != 1:
            raise ValueError("loss must be a scalar")
        tape.backward(out)
        value = float(out.value)
    else:
        value = float(np.asarray(out))
    grads = [np.zeros_like(v) if t.grad is None else np.asarray(t.grad, float).reshape(v.shape)
             for (_, v), t in zip(leaves, traced)]
    return value, rebuild(grads)


def jacobian(fn: Callable[[Any], Any], x) -> np.ndarray:
    """Dense Jacobian of a vector function of a vector, one reverse sweep per output."""
    tape = Tape()
    x = np.asarray(x, dtype=float)
    with recording(tape):
        xv = tape.leaf(x)
        out = fn(xv)
    if not isinstance(out, Var):
        return np.zeros((np.size(out), x.size))
    m = out.value.size
    J = np.zeros((m, x.size))
    for i in range(m):
        seed = np.zeros(m)
        seed[i] = 1.0
        tape.backward(out, seed.reshape(out.value.shape))
        if xv.grad is not None:
            J[i] = np.asarray(xv.grad).reshape(-1)
    return J
