"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tensor` wraps an immutable numpy array.  Every primitive applied to
a tensor that (transitively) requires gradients records its parents and a
vector-Jacobian closure.  :func:`backward` orders the recorded nodes into a
:class:`Tape` and sweeps it once in reverse.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to a primitive's rules."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        listed = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {listed}")


class DomainError(ValueError):
    pass


class ContractError(ValueError):
    pass


class Tensor:
    __slots__ = ("value", "requires_grad", "parents", "vjp", "op")

    def __init__(self, value, requires_grad: bool = False, *, _parents=(), _vjp=None, _op="leaf"):
        arr = np.array(value, dtype=np.float64)
        arr.flags.writeable = False
        self.value = arr
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = _parents
        self.vjp = _vjp
        self.op = _op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value)

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(value, parents: Sequence[Tensor], vjp, op: str) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(value, True, _parents=tuple(parents), _vjp=vjp, _op=op)
    return Tensor(value, _op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# --------------------------------------------------------------------------
# primitives
# --------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _make(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _make(
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _make(
        a.value * b.value,
        (a, b),
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
        "mul",
    )


def scale(a, k: float) -> Tensor:
    a = as_tensor(a)
    k = float(k)
    return _make(a.value * k, (a,), lambda g: (g * k,), "scale")


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a, b) -> Tensor:
    """Matrix product of 2-D or batched 3-D operands (numpy broadcasting over the batch)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (2, 3) or b.ndim not in (2, 3) or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)

    def vjp(g):
        ga = _unbroadcast(g @ _swap(b.value), a.shape)
        gb = _unbroadcast(_swap(a.value) @ g, b.shape)
        return ga, gb

    return _make(a.value @ b.value, (a, b), vjp, "matmul")


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", a.shape, axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.value.reshape(tuple(shape))
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ContractError("concat: no operands")
    try:
        out = np.concatenate([t.value for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in ts)) from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, ts, vjp, "concat")


def slice_(a, index) -> Tensor:
    """Basic or advanced numpy indexing; the gradient scatters back with accumulation."""
    a = as_tensor(a)
    try:
        out = a.value[index]
    except IndexError:
        raise ShapeError("slice", a.shape, (str(index),)) from None

    def vjp(g):
        full = np.zeros(a.shape)
        np.add.at(full, index, g)
        return (full,)

    return _make(out, (a,), vjp, "slice")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.value > 0
    return _make(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,), "relu")


def clamp(a, lo: float, hi: float) -> Tensor:
    """Elementwise clip to ``[lo, hi]``; zero gradient outside the interval."""
    a = as_tensor(a)
    mask = (a.value >= lo) & (a.value <= hi)
    return _make(np.clip(a.value, lo, hi), (a,), lambda g: (g * mask,), "clamp")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.value)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.value)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.value <= 0):
        raise DomainError(f"log: non-positive input (min {a.value.min():.6g})")
    return _make(np.log(a.value), (a,), lambda g: (g / a.value,), "log")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.value * a.value, (a,), lambda g: (2.0 * g * a.value,), "square")


def _expand(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)
    return _make(out, (a,), lambda g: (_expand(g, a.shape, axis, keepdims).copy(),), "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.value.mean(axis=axis, keepdims=keepdims)
    count = a.value.size // max(out.size, 1)
    return _make(out, (a,), lambda g: (_expand(g, a.shape, axis, keepdims) / count,), "mean")


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shift = a.value.max(axis=axis, keepdims=True)
    shifted = np.exp(a.value - shift)
    total = shifted.sum(axis=axis, keepdims=True)
    out = np.log(total) + shift
    soft = shifted / total
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return _make(out, (a,), vjp, "logsumexp")


def sym_inv_sqrt(a, floor: float = 1e-6) -> Tensor:
    """``A^{-1/2}`` for a symmetric matrix, eigenvalues clamped below at ``floor``.

    The backward pass uses the divided-difference (Daleckii-Krein) form of the
    derivative of a spectral matrix function.
    """
    a = as_tensor(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError("sym_inv_sqrt", a.shape)
    sym = 0.5 * (a.value + a.value.T)
    lam, q = np.linalg.eigh(sym)
    clamped = np.maximum(lam, floor)
    f = clamped ** -0.5
    fprime = np.where(lam > floor, -0.5 * clamped ** -1.5, 0.0)
    out = (q * f) @ q.T

    diff = lam[:, None] - lam[None, :]
    close = np.abs(diff) <= 1e-12 * np.maximum(1.0, np.abs(lam)[:, None])
    safe = np.where(close, 1.0, diff)
    divided = np.where(close, 0.5 * (fprime[:, None] + fprime[None, :]), (f[:, None] - f[None, :]) / safe)

    def vjp(g):
        inner = q.T @ (0.5 * (g + g.T)) @ q
        ga = q @ (divided * inner) @ q.T
        return (0.5 * (ga + ga.T),)

    return _make(out, (a,), vjp, "sym_inv_sqrt")


def nuclear_norm(a) -> Tensor:
    """Sum of singular values of a matrix; gradient ``U V^T``."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError("nuclear_norm", a.shape)
    u, s, vt = np.linalg.svd(a.value, full_matrices=False)
    return _make(s.sum(), (a,), lambda g: (g * (u @ vt),), "nuclear_norm")


# --------------------------------------------------------------------------
# tape and backward
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Tape:
    """Primitive applications reachable from one output, inputs before outputs."""

    nodes: tuple[Tensor, ...]

    @classmethod
    def record(cls, output: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in reversed(node.parents):
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(tuple(order))


def backward(loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to leaf tensors.

    Returns a mapping from each reachable leaf that requires gradients to its
    gradient array.  Tensors listed in ``wrt`` but unreachable map to zeros.
    """
    if loss.value.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    leaves: dict[int, Tensor] = {}
    if loss.requires_grad:
        tape = Tape.record(loss)
        grads[id(loss)] = np.ones(loss.shape)
        for node in reversed(tape.nodes):
            g = grads.pop(id(node), None) if node.parents else grads.get(id(node))
            if node.is_leaf:
                leaves[id(node)] = node
                continue
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = np.asarray(pg, dtype=np.float64)
    out = {leaf: grads[key] for key, leaf in leaves.items() if key in grads}
    for t in wrt or ():
        if t not in out:
            out[t] = np.zeros(t.shape)
    return out


def grad_check(f: Callable, point, eps: float = 1e-5, *, max_coords: int | None = None, seed: int = 0) -> float:
    """Max relative error between backward and central differences.

    ``point`` is an array or a mapping name -> array; ``f`` receives the same
    structure of tensors and returns a scalar tensor.  ``max_coords`` samples
    that many coordinates per array instead of perturbing every one.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ContractError(f"grad_check: eps {eps} outside [1e-7, 1e-3]")
    single = not isinstance(point, Mapping)
    arrays = {"x": np.asarray(point, dtype=np.float64)} if single else {
        k: np.asarray(v, dtype=np.float64) for k, v in point.items()
    }

    def call(vals, track: bool):
        ts = {k: Tensor(v, requires_grad=track) for k, v in vals.items()}
        return f(ts["x"]) if single else f(ts), ts

    loss, ts = call(arrays, True)
    grads = backward(loss, ts.values())
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, base in arrays.items():
        coords = np.arange(base.size)
        if max_coords is not None and base.size > max_coords:
            coords = rng.choice(base.size, size=max_coords, replace=False)
        g_ad = grads[ts[name]].reshape(-1)
        for c in coords:
            plus, minus = base.copy().reshape(-1), base.copy().reshape(-1)
            plus[c] += eps
            minus[c] -= eps
            fp = call({**arrays, name: plus.reshape(base.shape)}, False)[0].item()
            fm = call({**arrays, name: minus.reshape(base.shape)}, False)[0].item()
            g_fd = (fp - fm) / (2 * eps)
            worst = max(worst, abs(g_ad[c] - g_fd) / max(1.0, abs(g_fd)))
    return worst


PRIMITIVES: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "matmul": matmul,
    "transpose": transpose,
    "reshape": reshape,
    "concat": concat,
    "slice": slice_,
    "relu": relu,
    "clamp": clamp,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "square": square,
    "mean": mean,
    "sum": sum_,
    "logsumexp": logsumexp,
    "sym_inv_sqrt": sym_inv_sqrt,
    "nuclear_norm": nuclear_norm,
}


def apply_primitive(op: str, *inputs, **kwargs) -> Tensor:
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise ContractError(f"unknown primitive {op!r}; known: {sorted(PRIMITIVES)}") from None
    return fn(*inputs, **kwargs)
