"""Small reverse-mode autodiff over numpy arrays, plus Adam.

Only the handful of operations the joint models need are supported. A
:class:`Tape` records every primitive applied to its :class:`Var` nodes in
execution order; :meth:`Tape.gradient` replays that record backwards.

    tape = Tape()
    w = tape.var(np.ones(3))
    loss = (w * x).sum()
    (gw,) = tape.gradient(loss, [w])

Values are float64 and never mutated after being recorded.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    # sum out axes that broadcasting added or stretched
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class Var:
    """A node on a tape. Supports ``+ - * @`` and unary ``-``."""

    __slots__ = ("tape", "value", "idx")
    __array_priority__ = 100.0

    def __init__(self, tape: "Tape", value: np.ndarray, idx: int):
        self.tape = tape
        self.value = value
        self.idx = idx

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self):
        return f"Var(shape={self.value.shape}, idx={self.idx})"

    def _lift(self, other) -> "Var":
        if isinstance(other, Var):
            if other.tape is not self.tape:
                raise ContractError("operands belong to different tapes")
            return other
        return self.tape.const(other)

    def __add__(self, other):
        return add(self, self._lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, self._lift(other))

    def __rsub__(self, other):
        return sub(self._lift(other), self)

    def __mul__(self, other):
        return mul(self, self._lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, self.tape.const(-1.0))

    def __matmul__(self, other):
        return matmul(self, self._lift(other))

    def __rmatmul__(self, other):
        return matmul(self._lift(other), self)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


@dataclass
class _Node:
    parents: tuple[int, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None


class Tape:
    """Ordered record of primitive ops. Build one per batch."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self._values: list[np.ndarray] = []

    def __len__(self):
        return len(self._nodes)

    def var(self, value) -> Var:
        """Register a differentiable leaf."""
        arr = _as_array(value).copy()
        arr.setflags(write=False)
        return self._push(arr, (), None)

    def const(self, value) -> Var:
        arr = _as_array(value)
        return self._push(arr, (), None)

    def record(self, value: np.ndarray, parents: Sequence[Var], vjp) -> Var:
        value = _as_array(value)
        value.setflags(write=False)
        return self._push(value, tuple(p.idx for p in parents), vjp)

    def _push(self, value, parents, vjp) -> Var:
        self._nodes.append(_Node(parents, vjp))
        self._values.append(value)
        return Var(self, value, len(self._nodes) - 1)

    def backward(self, loss: Var) -> list[np.ndarray | None]:
        """Adjoint of ``loss`` with respect to every node (None if unreached)."""
        if loss.tape is not self:
            raise ContractError("loss was not recorded on this tape")
        if loss.value.size != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.value.shape}")
        adj: list[np.ndarray | None] = [None] * len(self._nodes)
        adj[loss.idx] = np.ones_like(loss.value)
        for i in range(loss.idx, -1, -1):
            g = adj[i]
            node = self._nodes[i]
            if g is None or node.vjp is None:
                continue
            for p, gp in zip(node.parents, node.vjp(g)):
                if gp is None:
                    continue
                adj[p] = gp if adj[p] is None else adj[p] + gp
        return adj

    def gradient(self, loss: Var, wrt: Sequence[Var]) -> list[np.ndarray]:
        adj = self.backward(loss)
        return [
            np.zeros_like(v.value) if adj[v.idx] is None else adj[v.idx].reshape(v.shape)
            for v in wrt
        ]


# ---------------------------------------------------------------- primitives


def add(a: Var, b: Var) -> Var:
    sa, sb = a.shape, b.shape
    return a.tape.record(
        a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    )


def sub(a: Var, b: Var) -> Var:
    sa, sb = a.shape, b.shape
    return a.tape.record(
        a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb))
    )


def mul(a: Var, b: Var) -> Var:
    av, bv = a.value, b.value
    return a.tape.record(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def matmul(a: Var, b: Var) -> Var:
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2:
        raise ShapeError("matmul supports 2-d operands only; use einsum")
    if av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul shapes {av.shape} and {bv.shape} do not align")
    return a.tape.record(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def einsum(subscripts: str, *operands: Var) -> Var:
    """Differentiable ``np.einsum`` with explicit output (``'ij,jk->ik'``)."""
    if "->" not in subscripts:
        raise ValueError("einsum requires an explicit '->' output")
    lhs, out = subscripts.replace(" ", "").split("->")
    ins = lhs.split(",")
    if len(ins) != len(operands):
        raise ShapeError("einsum operand count does not match subscripts")
    for s, op in zip(ins, operands):
        if len(s) != op.ndim or len(set(s)) != len(s):
            raise ShapeError(f"bad subscripts {s!r} for operand of shape {op.shape}")
    vals = [op.value for op in operands]
    try:
        result = np.einsum(subscripts, *vals)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc

    def vjp(g):
        grads = []
        for k, sk in enumerate(ins):
            others = [ins[j] for j in range(len(ins)) if j != k]
            seen = set(out).union(*others)
            kept = "".join(c for c in sk if c in seen)
            spec = ",".join([out] + others) + "->" + kept
            gk = np.einsum(spec, g, *[vals[j] for j in range(len(ins)) if j != k])
            if kept != sk:
                # indices summed only inside this operand: broadcast back
                full = [vals[k].shape[sk.index(c)] for c in sk]
                gk = np.expand_dims(gk, [i for i, c in enumerate(sk) if c not in seen])
                gk = np.broadcast_to(gk, full).copy()
            grads.append(gk)
        return grads

    return operands[0].tape.record(result, operands, vjp)


def mode1_product(H: Var, z: Var) -> Var:
    """``out[i, j] = sum_k H[k, i, j] * z[k]``."""
    if H.ndim != 3 or z.ndim != 1 or H.shape[0] != z.shape[0]:
        raise ShapeError(f"mode1_product: H {H.shape} incompatible with z {z.shape}")
    return einsum("kij,k->ij", H, z)


def take(a: Var, index) -> Var:
    """Gather rows of ``a`` along axis 0; repeated indices accumulate gradient."""
    index = np.asarray(index, dtype=np.intp)
    av_shape = a.shape

    def vjp(g):
        out = np.zeros(av_shape)
        np.add.at(out, index, g)
        return (out,)

    return a.tape.record(a.value[index], (a,), vjp)


def reshape(a: Var, shape) -> Var:
    old = a.shape
    return a.tape.record(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Var, axes=None) -> Var:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return a.tape.record(a.value.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def sum_(a: Var, axis=None) -> Var:
    shape = a.shape

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return a.tape.record(np.sum(a.value, axis=axis), (a,), vjp)


def mean(a: Var, axis=None) -> Var:
    shape = a.shape
    count = a.value.size if axis is None else np.prod([shape[i] for i in np.atleast_1d(axis)])

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return a.tape.record(np.mean(a.value, axis=axis), (a,), vjp)


def square(a: Var) -> Var:
    av = a.value
    return a.tape.record(av * av, (a,), lambda g: (2.0 * g * av,))


def sqrt(a: Var, eps: float = 0.0) -> Var:
    """``sqrt(a + eps)``; a small ``eps`` keeps the gradient finite at zero."""
    out = np.sqrt(a.value + eps)
    return a.tape.record(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a: Var) -> Var:
    out = np.tanh(a.value)
    return a.tape.record(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a: Var) -> Var:
    mask = a.value > 0
    return a.tape.record(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def exp(a: Var) -> Var:
    out = np.exp(a.value)
    return a.tape.record(out, (a,), lambda g: (g * out,))


def softmax_array(s, axis: int = -1) -> np.ndarray:
    """Max-shifted softmax on a plain array."""
    s = _as_array(s)
    e = np.exp(s - np.max(s, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax(a: Var, axis: int = -1) -> Var:
    p = softmax_array(a.value, axis)

    def vjp(g):
        return (p * (g - np.sum(g * p, axis=axis, keepdims=True)),)

    return a.tape.record(p, (a,), vjp)


def mse(pred: Var, target) -> Var:
    """Mean squared error over all elements."""
    target = pred._lift(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: prediction {pred.shape} vs target {target.shape}")
    return mean(square(pred - target))


def forward_backward(
    build: Callable[[Tape, list[Var]], Var], params: Sequence
) -> tuple[float, list[np.ndarray]]:
    """Run ``build`` on a fresh tape and return ``(loss, grads)`` for ``params``."""
    tape = Tape()
    leaves = [tape.var(p) for p in params]
    loss = build(tape, leaves)
    if not isinstance(loss, Var) or loss.value.size != 1:
        raise ContractError("graph must produce a scalar loss")
    return float(loss.value), tape.gradient(loss, leaves)


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


@dataclass
class Adam:
    """Adam over a dict of named arrays, updated in place.

    ``lr_overrides`` assigns a different learning rate to particular names.
    Moments (and the bias-correction step) of one name can be reset without
    touching the others.
    """

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_overrides: dict[str, float] = field(default_factory=dict)
    state: dict[str, AdamState] = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            p = params[name]
            if p.shape != g.shape:
                raise ShapeError(f"{name}: param {p.shape} vs grad {g.shape}")
            st = self.state.get(name)
            if st is None or st.m.shape != p.shape:
                st = self.state[name] = AdamState(np.zeros_like(p), np.zeros_like(p))
            st.step += 1
            st.m *= self.beta1
            st.m += (1.0 - self.beta1) * g
            st.v *= self.beta2
            st.v += (1.0 - self.beta2) * g * g
            m_hat = st.m / (1.0 - self.beta1**st.step)
            v_hat = st.v / (1.0 - self.beta2**st.step)
            lr = self.lr_overrides.get(name, self.lr)
            p -= lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def reset(self, name: str, index=None) -> None:
        """Zero the moments of ``name`` (or of rows ``index`` of it)."""
        st = self.state.get(name)
        if st is None:
            return
        if index is None:
            st.m[...] = 0.0
            st.v[...] = 0.0
            st.step = 0
        else:
            st.m[index] = 0.0
            st.v[index] = 0.0

    def snapshot(self) -> dict[str, AdamState]:
        return {k: AdamState(s.m.copy(), s.v.copy(), s.step) for k, s in self.state.items()}

    def restore(self, snap: dict[str, AdamState]) -> None:
        self.state = {k: AdamState(s.m.copy(), s.v.copy(), s.step) for k, s in snap.items()}
