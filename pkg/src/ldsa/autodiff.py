"""Reverse-mode automatic differentiation over dense float64 arrays.

Operations are recorded on the active :class:`Tape` (one per thread). A tensor
only participates in the tape when at least one of its inputs requires a
gradient, so forward passes run outside a tape cost no bookkeeping.

    >>> w = Tensor([[1.0, 2.0]], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (w * w).sum()
    ...     tape.backward(loss)
    >>> w.grad
    array([[2., 4.]])
"""
from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "DomainError",
    "EvaluationError",
    "Tape",
    "Tensor",
    "abs",
    "add",
    "clamp_min",
    "concat",
    "detach",
    "elementwise",
    "elu",
    "exp",
    "gather",
    "grad_check",
    "grad_check_params",
    "gru_cell",
    "gru_sequence",
    "log",
    "log_softmax",
    "matmul",
    "mul",
    "neg",
    "relu",
    "sigmoid",
    "softmax",
    "stack",
    "straight_through",
    "tanh",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """An operation was evaluated outside its mathematical domain."""


class EvaluationError(RuntimeError):
    """A function under gradient check produced a non-finite value."""


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of operations; replayed in reverse by :meth:`backward`."""

    def __init__(self) -> None:
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> Tape:
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, parents: tuple[Tensor, ...], backward: Callable) -> None:
        out.node_id = len(self.nodes)
        self.nodes.append((out, parents, backward))

    def backward(self, root: Tensor) -> None:
        if root.values.size != 1:
            raise DimensionError(f"backward needs a scalar root, got shape {root.shape}")
        if root.node_id is None or root.node_id >= len(self.nodes) or self.nodes[root.node_id][0] is not root:
            raise ValueError("root tensor was not recorded on this tape")
        root.grad = np.ones_like(root.values)
        for out, parents, backward in reversed(self.nodes[: root.node_id + 1]):
            if out.grad is None:
                continue
            grads = backward(out.grad)
            for parent, g in zip(parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                # gradients are never mutated in place, so aliasing g is safe
                parent.grad = g if parent.grad is None else parent.grad + g


class Tensor:
    """Dense float64 array with an optional gradient accumulator."""

    __slots__ = ("values", "grad", "requires_grad", "node_id", "name")
    __array_ufunc__ = None

    def __init__(self, values, requires_grad: bool = False, name: str | None = None) -> None:
        self.values = np.asarray(values, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.values.size == 1 else float(self.values)

    def zero_grad(self) -> None:
        self.grad = None

    # operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by constants")
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)

    # method forms
    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return _sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        count = self.values.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return _sum(self, axis, keepdims) / float(count)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return _transpose(self, axes or None)

    def tanh(self) -> Tensor:
        return tanh(self)

    def sigmoid(self) -> Tensor:
        return sigmoid(self)

    def relu(self) -> Tensor:
        return relu(self)

    def exp(self) -> Tensor:
        return exp(self)

    def log(self) -> Tensor:
        return log(self)

    def abs(self) -> Tensor:
        return abs(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(values: np.ndarray, parents: tuple[Tensor, ...], backward: Callable) -> Tensor:
    out = Tensor(values)
    tape = current_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(out, parents, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# binary ops

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _result(a.values + b.values, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    av, bv = a.values, b.values

    def backward(g):
        return (
            _unbroadcast(g * bv, av.shape) if a.requires_grad else None,
            _unbroadcast(g * av, bv.shape) if b.requires_grad else None,
        )

    return _result(av * bv, (a, b), backward)


def matmul(a, b) -> Tensor:
    """Matrix product, batched over leading dimensions with broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    av, bv = a.values, b.values

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape) if b.requires_grad else None
        return ga, gb

    return _result(av @ bv, (a, b), backward)


# unary ops

def neg(x) -> Tensor:
    x = _as_tensor(x)
    return _result(-x.values, (x,), lambda g: (-g,))


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    y = np.tanh(x.values)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    y = _sigmoid(x.values)
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.values > 0
    return _result(np.where(mask, x.values, 0.0), (x,), lambda g: (g * mask,))


def elu(x, alpha: float = 1.0) -> Tensor:
    x = _as_tensor(x)
    pos = x.values > 0
    expm = alpha * np.expm1(np.minimum(x.values, 0.0))
    y = np.where(pos, x.values, expm)
    return _result(y, (x,), lambda g: (g * np.where(pos, 1.0, expm + alpha),))


def abs(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = _as_tensor(x)
    # subgradient at exactly 0 is 0
    sign = np.sign(x.values)
    return _result(np.abs(x.values), (x,), lambda g: (g * sign,))


def exp(x) -> Tensor:
    x = _as_tensor(x)
    y = np.exp(x.values)
    return _result(y, (x,), lambda g: (g * y,))


def log(x) -> Tensor:
    x = _as_tensor(x)
    if np.any(x.values <= 0):
        raise DomainError(f"log of non-positive value (min {x.values.min():.3g})")
    v = x.values
    return _result(np.log(v), (x,), lambda g: (g / v,))


def clamp_min(x, floor: float) -> Tensor:
    """max(x, floor); gradient passes only where x exceeds the floor."""
    x = _as_tensor(x)
    keep = x.values > floor
    return _result(np.where(keep, x.values, floor), (x,), lambda g: (g * keep,))


def detach(x) -> Tensor:
    x = _as_tensor(x)
    return Tensor(x.values)


_ELEMENTWISE = {
    "add": add,
    "mul": mul,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "abs": abs,
    "exp": exp,
    "log": log,
    "neg": neg,
    "relu": relu,
    "elu": elu,
}


def elementwise(op: str, *inputs) -> Tensor:
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}; expected one of {sorted(_ELEMENTWISE)}") from None
    if op in ("add", "mul"):
        a, b = (_as_tensor(t) for t in inputs)
        if a.shape != b.shape:
            raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")
    return fn(*inputs)


# reductions and normalisation

def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    shifted = x.values - x.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (x,), backward)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    shifted = x.values - x.values.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    s = np.exp(y)
    return _result(y, (x,), lambda g: (g - s * g.sum(axis=axis, keepdims=True),))


def _sum(x: Tensor, axis, keepdims: bool) -> Tensor:
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _result(x.values.sum(axis=axis, keepdims=keepdims), (x,), backward)


# shape manipulation

def _reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _result(x.values.reshape(shape), (x,), lambda g: (g.reshape(old),))


def _transpose(x: Tensor, axes) -> Tensor:
    inverse = None if axes is None else tuple(np.argsort(axes))
    return _result(np.transpose(x.values, axes), (x,), lambda g: (np.transpose(g, inverse),))


def _getitem(x: Tensor, index) -> Tensor:
    shape = x.shape

    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros(shape)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result(x.values[index], (x,), backward)


def _is_basic_index(index) -> bool:
    # basic indices never repeat an element, so plain assignment is a valid scatter
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, np.integer, slice)) or p is Ellipsis or p is None for p in parts)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _result(
        np.concatenate([t.values for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    n = len(tensors)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _result(np.stack([t.values for t in tensors], axis=axis), tensors, backward)


def gather(x, index: np.ndarray) -> Tensor:
    """Pick ``x[..., index[...]]`` along the last axis (index has x.ndim-1 dims)."""
    x = _as_tensor(x)
    idx = np.asarray(index)[..., None]
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        np.put_along_axis(full, idx, g[..., None], axis=-1)
        return (full,)

    return _result(np.take_along_axis(x.values, idx, axis=-1)[..., 0], (x,), backward)


def straight_through(hard: np.ndarray, soft: Tensor) -> Tensor:
    """Forward value is exactly ``hard``; gradient flows to ``soft`` unchanged."""
    soft = _as_tensor(soft)
    hard = np.asarray(hard, dtype=np.float64)
    if hard.shape != soft.shape:
        raise DimensionError(f"straight_through: shapes {hard.shape} and {soft.shape} differ")
    return _result(hard.copy(), (soft,), lambda g: (g,))


# recurrent cell

def gru_cell(x, h, w_ih, w_hh, b_ih, b_hh) -> Tensor:
    """One GRU step with gates ordered (reset, update, new).

    x: (N, I), h: (N, H), w_ih: (I, 3H), w_hh: (H, 3H), biases: (3H,).
    """
    x, h, w_ih, w_hh, b_ih, b_hh = (_as_tensor(t) for t in (x, h, w_ih, w_hh, b_ih, b_hh))
    H = h.shape[-1]
    if w_ih.shape != (x.shape[-1], 3 * H) or w_hh.shape != (H, 3 * H):
        raise DimensionError(
            f"gru_cell: input {x.shape}, hidden {h.shape}, w_ih {w_ih.shape}, w_hh {w_hh.shape}"
        )
    xv, hv = x.values, h.values
    gi = xv @ w_ih.values + b_ih.values
    gh = hv @ w_hh.values + b_hh.values
    r = _sigmoid(gi[:, :H] + gh[:, :H])
    z = _sigmoid(gi[:, H : 2 * H] + gh[:, H : 2 * H])
    gh_n = gh[:, 2 * H :]
    n = np.tanh(gi[:, 2 * H :] + r * gh_n)
    out = (1.0 - z) * n + z * hv

    def backward(g):
        dn_pre = g * (1.0 - z) * (1.0 - n * n)
        dz_pre = g * (hv - n) * z * (1.0 - z)
        dr_pre = dn_pre * gh_n * r * (1.0 - r)
        dgi = np.concatenate([dr_pre, dz_pre, dn_pre], axis=1)
        dgh = np.concatenate([dr_pre, dz_pre, dn_pre * r], axis=1)
        return (
            dgi @ w_ih.values.T if x.requires_grad else None,
            g * z + dgh @ w_hh.values.T if h.requires_grad else None,
            xv.T @ dgi if w_ih.requires_grad else None,
            hv.T @ dgh if w_hh.requires_grad else None,
            dgi.sum(axis=0) if b_ih.requires_grad else None,
            dgh.sum(axis=0) if b_hh.requires_grad else None,
        )

    return _result(out, (x, h, w_ih, w_hh, b_ih, b_hh), backward)


def gru_sequence(xs, h0, w_ih, w_hh, b_ih, b_hh) -> Tensor:
    """GRU over the leading time axis of xs (T, N, I); returns all states (T, N, H).

    Same maths as repeated :func:`gru_cell`, recorded as one tape node with
    backpropagation through time. The input projection is done for all steps
    in a single matmul.
    """
    xs, h0, w_ih, w_hh, b_ih, b_hh = (_as_tensor(t) for t in (xs, h0, w_ih, w_hh, b_ih, b_hh))
    T, N, I = xs.shape
    H = h0.shape[-1]
    if w_ih.shape != (I, 3 * H) or w_hh.shape != (H, 3 * H) or h0.shape != (N, H):
        raise DimensionError(
            f"gru_sequence: inputs {xs.shape}, h0 {h0.shape}, w_ih {w_ih.shape}, w_hh {w_hh.shape}"
        )
    whh = w_hh.values
    gi_all = (xs.values.reshape(T * N, I) @ w_ih.values + b_ih.values).reshape(T, N, 3 * H)
    hs = np.empty((T, N, H))
    rs, zs, ns, ghns = (np.empty((T, N, H)) for _ in range(4))
    h = h0.values
    for t in range(T):
        gi = gi_all[t]
        gh = h @ whh + b_hh.values
        r = _sigmoid(gi[:, :H] + gh[:, :H])
        z = _sigmoid(gi[:, H : 2 * H] + gh[:, H : 2 * H])
        gh_n = gh[:, 2 * H :]
        n = np.tanh(gi[:, 2 * H :] + r * gh_n)
        h = (1.0 - z) * n + z * h
        hs[t], rs[t], zs[t], ns[t], ghns[t] = h, r, z, n, gh_n

    def backward(g):
        dgi_all = np.empty((T, N, 3 * H))
        dgh_all = np.empty((T, N, 3 * H))
        dh = np.zeros((N, H))
        for t in range(T - 1, -1, -1):
            dh = dh + g[t]
            r, z, n, gh_n = rs[t], zs[t], ns[t], ghns[t]
            h_prev = hs[t - 1] if t > 0 else h0.values
            dn_pre = dh * (1.0 - z) * (1.0 - n * n)
            dz_pre = dh * (h_prev - n) * z * (1.0 - z)
            dr_pre = dn_pre * gh_n * r * (1.0 - r)
            dgi_all[t, :, :H] = dr_pre
            dgi_all[t, :, H : 2 * H] = dz_pre
            dgi_all[t, :, 2 * H :] = dn_pre
            dgh_all[t, :, :H] = dr_pre
            dgh_all[t, :, H : 2 * H] = dz_pre
            dgh_all[t, :, 2 * H :] = dn_pre * r
            dh = dh * z + dgh_all[t] @ whh.T
        dgi = dgi_all.reshape(T * N, 3 * H)
        dgh = dgh_all.reshape(T * N, 3 * H)
        h_prevs = np.concatenate([h0.values[None], hs[:-1]], axis=0).reshape(T * N, H)
        return (
            (dgi @ w_ih.values.T).reshape(T, N, I) if xs.requires_grad else None,
            dh if h0.requires_grad else None,
            xs.values.reshape(T * N, I).T @ dgi if w_ih.requires_grad else None,
            h_prevs.T @ dgh if w_hh.requires_grad else None,
            dgi.sum(axis=0) if b_ih.requires_grad else None,
            dgh.sum(axis=0) if b_hh.requires_grad else None,
        )

    return _result(hs, (xs, h0, w_ih, w_hh, b_ih, b_hh), backward)


# finite-difference oracle

def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |central difference|)."""
    return grad_check_params(lambda: f(x), [x], h)


def grad_check_params(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> float:
    """Gradient check of a closure over several leaf tensors, perturbed in place."""
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    saved = [(p.requires_grad, p.grad) for p in params]
    for p in params:
        p.values = np.ascontiguousarray(p.values)
        p.requires_grad = True
        p.grad = None
    try:
        with Tape() as tape:
            out = f()
            value = out.item()
            if not np.isfinite(value):
                raise EvaluationError(f"function value is not finite: {value}")
            tape.backward(out)
        analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]

        def evaluate() -> float:
            v = f().item()
            if not np.isfinite(v):
                raise EvaluationError(f"function value is not finite: {v}")
            return v

        worst = 0.0
        for p, grad in zip(params, analytic):
            flat = p.values.reshape(-1)
            gflat = grad.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                up = evaluate()
                flat[i] = orig - h
                down = evaluate()
                flat[i] = orig
                numeric = (up - down) / (2.0 * h)
                worst = max(worst, np.abs(gflat[i] - numeric) / max(1.0, np.abs(numeric)))
        return float(worst)
    finally:
        for p, (req, g) in zip(params, saved):
            p.requires_grad = req
            p.grad = g
