"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tensor` wraps a numpy array. Every differentiable operation applied
to a tensor that requires gradients records a :class:`TapeNode` holding its
inputs and a closure mapping the upstream gradient to per-input gradients.
The tape is built dynamically during the forward pass and released by
:func:`backward` unless ``retain_graph`` is set.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class ContractViolation(ValueError):
    """An operation was called outside its precondition."""


class GraphError(RuntimeError):
    """The tape reachable from a loss is not a DAG."""


@dataclass(eq=False)
class TapeNode:
    op_kind: str
    inputs: tuple
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_node", "_retain")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._node: TapeNode | None = None
        self._retain = False

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.grad = None
        t.requires_grad = False
        t.name = None
        t._node = None
        t._retain = False
        return t

    # ------------------------------------------------------------------ info
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractViolation(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def retain_grad(self) -> "Tensor":
        """Keep ``.grad`` on this (non-leaf) tensor after backward."""
        self._retain = True
        return self

    def backward(self, retain_graph: bool = False) -> None:
        backward(self, retain_graph=retain_graph)

    # ------------------------------------------------------------ arithmetic
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

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def sqrt(self):
        return sqrt(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def function(op_kind: str, data: np.ndarray, inputs: Sequence[Tensor],
             backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Wrap ``data`` as the output of a custom differentiable op.

    ``backward_fn`` receives the gradient w.r.t. the output and returns one
    entry per input (``None`` for inputs that need no gradient). A tape node
    is only recorded when some input requires a gradient.
    """
    out = Tensor._wrap(np.asarray(data, dtype=np.float64))
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = TapeNode(op_kind, tuple(inputs), backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- backward
def _topological_order(root: Tensor) -> list[Tensor]:
    """Post-order over tensors requiring grad; raises GraphError on a cycle."""
    order: list[Tensor] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack: list[tuple[Tensor, int]] = [(root, 0)]
    state[id(root)] = 1
    while stack:
        t, i = stack.pop()
        inputs = t._node.inputs if t._node is not None else ()
        while i < len(inputs) and not inputs[i].requires_grad:
            i += 1
        if i < len(inputs):
            stack.append((t, i + 1))
            child = inputs[i]
            s = state.get(id(child))
            if s == 1:
                raise GraphError(f"cycle detected through {child._node.op_kind if child._node else 'leaf'}")
            if s is None:
                state[id(child)] = 1
                stack.append((child, 0))
        else:
            state[id(t)] = 2
            order.append(t)
    return order


def _propagate(root: Tensor, seed: np.ndarray, retain_graph: bool,
               wanted: dict[int, Tensor] | None) -> dict[int, np.ndarray]:
    order = _topological_order(root)
    pending: dict[int, np.ndarray] = {id(root): seed}
    captured: dict[int, np.ndarray] = {}
    for t in reversed(order):
        g = pending.pop(id(t), None)
        if g is None:
            continue
        if wanted is not None:
            if id(t) in wanted:
                captured[id(t)] = g
        elif t._node is None or t._retain:
            t.grad = g.copy() if t.grad is None else t.grad + g
        node = t._node
        if node is None:
            continue
        grads = node.backward(g)
        for inp, ig in zip(node.inputs, grads):
            if ig is None or not inp.requires_grad:
                continue
            ig = _unbroadcast(np.asarray(ig, dtype=np.float64), inp.shape)
            prev = pending.get(id(inp))
            pending[id(inp)] = ig if prev is None else prev + ig
        if not retain_graph:
            t._node = None
    return captured


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every leaf ``t`` requiring grad."""
    if loss.data.size != 1:
        raise ContractViolation(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    _propagate(loss, np.ones_like(loss.data), retain_graph, None)


def grad(loss: Tensor, inputs: Sequence[Tensor], retain_graph: bool = False) -> list[np.ndarray]:
    """Gradients of a scalar ``loss`` w.r.t. ``inputs`` without touching any ``.grad``."""
    if loss.data.size != 1:
        raise ContractViolation(f"grad needs a scalar loss, got shape {loss.shape}")
    wanted = {id(t): t for t in inputs}
    captured = _propagate(loss, np.ones_like(loss.data), retain_graph, wanted) if loss.requires_grad else {}
    return [captured.get(id(t), np.zeros_like(t.data)) for t in inputs]


# -------------------------------------------------------------- primitives
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return function("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return function("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return function("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return function("div", out, (a, b), lambda g: (g / b.data, -g * out / b.data))


def neg(a: Tensor) -> Tensor:
    return function("neg", -a.data, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    x = a.data
    return function("pow", x ** exponent, (a,), lambda g: (g * exponent * x ** (exponent - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return function("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return function("log", np.log(x), (a,), lambda g: (g / x,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return function("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return function("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return function("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return function("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (np.where(mask, g, 0.0),))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    A, B = a.data, b.data
    if A.ndim < 2 or B.ndim < 2:
        raise ContractViolation("matmul expects operands with at least 2 dimensions")

    def back(g):
        ga = g @ np.swapaxes(B, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(A, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return function("matmul", A @ B, (a, b), back)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return function("sum", np.sum(a.data, axis=axis, keepdims=keepdims), (a,), back)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return function("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else tuple(np.argsort(axes))
    return function("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a: Tensor, index) -> Tensor:
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return function("getitem", a.data[index], (a,), back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return function("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors,
                    lambda g: tuple(np.split(g, splits, axis=axis)))


def grad_reverse(x: Tensor, lam: float) -> Tensor:
    """Identity forward; the backward pass multiplies the upstream gradient by ``-lam``."""
    if lam < 0:
        raise ContractViolation(f"gradient reversal needs lambda >= 0, got {lam}")
    scale = -float(lam)
    return function("grad_reverse", x.data.copy(), (x,), lambda g: (scale * g,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * np.tanh(0.5 * x) + 0.5


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean softmax cross-entropy of ``logits`` (B x C) against one-hot ``targets``."""
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=np.float64)
    if logits.ndim != 2 or t.shape != logits.shape:
        raise ContractViolation(f"cross_entropy shape mismatch: logits {logits.shape}, targets {t.shape}")
    if logits.shape[1] < 2:
        raise ContractViolation("cross_entropy needs at least 2 classes")
    ones = (t == 1.0).sum(axis=1)
    zeros = (t == 0.0).sum(axis=1)
    bad = np.flatnonzero((ones != 1) | (ones + zeros != t.shape[1]))
    if bad.size:
        raise ContractViolation(f"target row {int(bad[0])} is not one-hot")
    logp = log_softmax(logits.data)
    batch = logits.shape[0]
    loss = -(logp * t).sum() / batch

    def back(g):
        return (g * (np.exp(logp) - t) / batch,)

    return function("cross_entropy", np.asarray(loss), (logits,), back)


# ---------------------------------------------------------- gradient check
FD_STEP = 1e-5


@dataclass
class GradCheckReport:
    op_name: str
    max_rel_error: float
    per_input_errors: list[float] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < 1e-4


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def numeric_gradient(f: Callable[[], float], array: np.ndarray, h: float = FD_STEP,
                     indices: Iterable[tuple] | None = None) -> np.ndarray:
    """Central differences of ``f`` w.r.t. ``array`` (perturbed in place, then restored)."""
    out = np.zeros_like(array)
    it = indices if indices is not None else np.ndindex(array.shape)
    for idx in it:
        orig = array[idx]
        array[idx] = orig + h
        fp = f()
        array[idx] = orig - h
        fm = f()
        array[idx] = orig
        out[idx] = (fp - fm) / (2 * h)
    return out


def _near_kink(inputs: list[np.ndarray], tol: float = 1e-3) -> bool:
    return any(np.any(np.abs(x) < tol) for x in inputs)


def check_gradients(op: Callable[..., Tensor], input_shapes: Sequence[tuple], seed: int = 0,
                    op_name: str | None = None, avoid_kinks: bool = False,
                    sampler: Callable[[np.random.Generator, tuple], np.ndarray] | None = None,
                    max_resample: int = 20) -> GradCheckReport:
    """Compare backward gradients of ``op`` with central differences.

    ``op`` maps tensors of ``input_shapes`` to a tensor of any shape, which is
    reduced to a scalar by a fixed random projection. With ``avoid_kinks``
    the inputs are redrawn while any value sits within 1e-3 of zero.
    """
    rng = np.random.default_rng(seed)
    draw = sampler or (lambda r, s: r.standard_normal(s))
    arrays = [draw(rng, tuple(s)) for s in input_shapes]
    for _ in range(max_resample):
        if not (avoid_kinks and _near_kink(arrays)):
            break
        arrays = [draw(rng, tuple(s)) for s in input_shapes]

    probe = op(*[Tensor(a) for a in arrays])
    weights = rng.standard_normal(probe.shape)

    def scalar() -> float:
        return float(np.sum(op(*[Tensor(a) for a in arrays]).data * weights))

    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    (op(*leaves) * Tensor(weights)).sum().backward()
    errors = []
    for leaf, arr in zip(leaves, arrays):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(arr)
        numeric = numeric_gradient(scalar, arr)
        errors.append(float(relative_error(analytic, numeric).max()) if arr.size else 0.0)
    return GradCheckReport(op_name or getattr(op, "__name__", "op"), max(errors, default=0.0), errors)
