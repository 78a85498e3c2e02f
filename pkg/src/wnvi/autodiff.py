"""Tape-based reverse-mode automatic differentiation over float64 arrays.

Define-by-run: a fresh ``Tape`` is recorded per evaluation and discarded
after the backward pass.  The backward pass is a pure function of the tape
(no mutation), so calling it twice on the same root yields identical
gradients.  Also provides the ADAM optimizer in the gradient-*ascent*
convention used by the training loop.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class DomainError(ValueError):
    """Operand values are outside the mathematical domain of the op."""


class _Node:
    __slots__ = ("parents", "vjp")

    def __init__(self, parents, vjp):
        self.parents = parents   # node ids of grad-requiring inputs
        self.vjp = vjp           # grad_out -> tuple of parent grads


class Tape:
    """Records one computation graph; parents always precede children."""

    def __init__(self):
        self._nodes = []

    def __len__(self):
        return len(self._nodes)

    def _record(self, parents, vjp) -> int:
        self._nodes.append(_Node(parents, vjp))
        return len(self._nodes) - 1

    def leaf(self, data) -> "Tensor":
        """Register a differentiable leaf (parameter or sample input)."""
        arr = np.asarray(data, dtype=np.float64)
        nid = self._record((), None)
        return Tensor(arr, self, nid)


class Tensor:
    """Array value, optionally attached to a tape node.

    A tensor with ``requires_grad`` belongs to exactly one tape; constants
    carry no tape.  Arithmetic operators delegate to the module-level ops.
    """

    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape=None, node=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node = node

    @property
    def requires_grad(self) -> bool:
        return self.tape is not None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        tag = f" node={self.node}" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    # operator sugar
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _tape_of(*tensors) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise ValueError("operands belong to different tapes")
    return tape


def _make(data, inputs, grad_fns):
    """Record an op result.  grad_fns[i] maps upstream grad to the gradient
    of inputs[i]; only grad-requiring inputs are wired into the tape."""
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(data)
    parents, fns = [], []
    for t, fn in zip(inputs, grad_fns):
        if t.requires_grad:
            parents.append(t.node)
            fns.append(fn)

    def vjp(g):
        return tuple(fn(g) for fn in fns)

    nid = tape._record(tuple(parents), vjp)
    return Tensor(data, tape, nid)


def _unbroadcast(g, shape):
    """Reduce gradient g back to a broadcast operand's shape."""
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: cannot broadcast {a.data.shape} and "
                         f"{b.data.shape}") from exc


# ---------------------------------------------------------------------------
# elementwise ops

def add(a, b):
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 (lambda g: _unbroadcast(g, a.data.shape),
                  lambda g: _unbroadcast(g, b.data.shape)))


def sub(a, b):
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 (lambda g: _unbroadcast(g, a.data.shape),
                  lambda g: _unbroadcast(-g, b.data.shape)))


def mul(a, b):
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 (lambda g: _unbroadcast(g * b.data, a.data.shape),
                  lambda g: _unbroadcast(g * a.data, b.data.shape)))


def div(a, b):
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "div")
    return _make(a.data / b.data, (a, b),
                 (lambda g: _unbroadcast(g / b.data, a.data.shape),
                  lambda g: _unbroadcast(-g * a.data / b.data ** 2, b.data.shape)))


def neg(a):
    a = _lift(a)
    return _make(-a.data, (a,), (lambda g: -g,))


def square(a):
    a = _lift(a)
    return _make(a.data ** 2, (a,), (lambda g: 2.0 * a.data * g,))


def exp(a):
    a = _lift(a)
    out = np.exp(a.data)
    return _make(out, (a,), (lambda g: g * out,))


def log(a):
    a = _lift(a)
    if np.any(a.data <= 0):
        raise DomainError("log requires strictly positive input")
    return _make(np.log(a.data), (a,), (lambda g: g / a.data,))


def tanh(a):
    a = _lift(a)
    out = np.tanh(a.data)
    return _make(out, (a,), (lambda g: g * (1.0 - out ** 2),))


def sigmoid(a):
    a = _lift(a)
    out = expit(a.data)
    return _make(out, (a,), (lambda g: g * out * (1.0 - out),))


def silu(a):
    a = _lift(a)
    s = expit(a.data)
    return _make(a.data * s, (a,),
                 (lambda g: g * s * (1.0 + a.data * (1.0 - s)),))


# ---------------------------------------------------------------------------
# structural ops

def matmul(a, b):
    a, b = _lift(a), _lift(b)
    ad, bd = a.data, b.data
    if ad.ndim == 0 or bd.ndim == 0 or ad.ndim > 2 or bd.ndim > 2:
        raise ShapeError(f"matmul needs 1D/2D operands, got {ad.shape}@{bd.shape}")
    if ad.shape[-1] != (bd.shape[0] if bd.ndim >= 1 else None):
        raise ShapeError(f"matmul inner dimensions differ: {ad.shape}@{bd.shape}")
    out = ad @ bd
    if ad.ndim == 2 and bd.ndim == 2:
        fns = (lambda g: g @ bd.T, lambda g: ad.T @ g)
    elif ad.ndim == 2 and bd.ndim == 1:
        fns = (lambda g: np.outer(g, bd), lambda g: ad.T @ g)
    else:  # 1D @ 2D
        fns = (lambda g: bd @ g, lambda g: np.outer(ad, g))
    return _make(out, (a, b), fns)


def tsum(a, axis=None, keepdims=False):
    a = _lift(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.data.shape).copy()

    return _make(out, (a,), (back,))


def gather(a, indices):
    """Rows a[indices] along the first axis."""
    a = _lift(a)
    idx = np.asarray(indices, dtype=np.intp)
    if np.any(idx < 0) or np.any(idx >= a.data.shape[0]):
        raise ShapeError("gather index out of range")

    def back(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return out

    return _make(a.data[idx], (a,), (back,))


def concat(tensors, axis=0):
    ts = [_lift(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def back_for(i):
        sl = [slice(None)] * ts[i].data.ndim
        sl[axis] = slice(offsets[i], offsets[i + 1])
        return lambda g: g[tuple(sl)]

    return _make(np.concatenate([t.data for t in ts], axis=axis), tuple(ts),
                 tuple(back_for(i) for i in range(len(ts))))


def reshape(a, shape):
    a = _lift(a)
    return _make(a.data.reshape(shape), (a,),
                 (lambda g: np.asarray(g).reshape(a.data.shape),))


def transpose(a):
    a = _lift(a)
    if a.data.ndim != 2:
        raise ShapeError("transpose expects a 2D tensor")
    return _make(a.data.T.copy(), (a,), (lambda g: np.asarray(g).T,))


def logdet(a):
    """log det of a symmetric positive-definite matrix (small, dense)."""
    a = _lift(a)
    sign, val = np.linalg.slogdet(a.data)
    if sign <= 0:
        raise DomainError("logdet requires a positive-definite matrix")
    inv = np.linalg.inv(a.data)
    return _make(np.asarray(val), (a,), (lambda g: g * inv.T,))


# ---------------------------------------------------------------------------
# backward pass

class Gradients:
    """Gradient lookup keyed by tensor; zeros for unreached leaves."""

    def __init__(self, tape, table):
        self._tape = tape
        self._table = table

    def __getitem__(self, t: Tensor) -> np.ndarray:
        if t.tape is not self._tape:
            raise ValueError("tensor does not belong to the differentiated tape")
        g = self._table.get(t.node)
        return np.zeros_like(t.data) if g is None else g


def backward(root: Tensor) -> Gradients:
    """Reverse-mode sweep from a scalar root over its tape.

    Each node is visited exactly once, in reverse recording order; the tape
    is left untouched, so repeated calls give identical results.
    """
    if not root.requires_grad:
        raise ValueError("backward root is not attached to a tape")
    if root.data.size != 1:
        raise ValueError(f"backward root must be scalar, got shape {root.data.shape}")
    tape = root.tape
    table = {root.node: np.ones_like(root.data)}
    for nid in range(root.node, -1, -1):
        g = table.get(nid)
        if g is None:
            continue
        node = tape._nodes[nid]
        if node.vjp is None:      # leaf
            continue
        for pid, pg in zip(node.parents, node.vjp(g)):
            if pid in table:
                table[pid] = table[pid] + pg
            else:
                table[pid] = pg
    return Gradients(tape, table)


# ---------------------------------------------------------------------------
# ADAM (gradient ascent)

@dataclass
class AdamState:
    """Per-parameter first/second moments for ADAM."""

    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def adam_init(params: dict, learning_rate: float = 1e-4,
              beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    state = AdamState(learning_rate, beta1, beta2, eps)
    for k, v in params.items():
        state.first_moment[k] = np.zeros_like(v)
        state.second_moment[k] = np.zeros_like(v)
    return state


def adam_step(params: dict, grads: dict, state: AdamState):
    """One ADAM ascent step, in place; returns (params, state)."""
    state.step += 1
    b1, b2, t = state.beta1, state.beta2, state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape "
                             f"{p.shape} for '{k}'")
        m = state.first_moment[k]
        v = state.second_moment[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g ** 2
        p += state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state
