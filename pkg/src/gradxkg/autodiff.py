"""Dense float64 tensors with a recording tape for reverse-mode gradients.

The engine is deliberately small: 2-D matmul, equal-shape elementwise ops,
axis reductions, and a single active tape that records every operation in
execution order. One tape covers one unit of work (a training step or one
explanation); nested tapes are rejected. Gradients are dense and exact for
the recorded graph; ReLU's subgradient at 0 is fixed to 0.
"""

from __future__ import annotations

import itertools
import threading
from typing import Callable, Optional, Union

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NumericError",
    "TapeError",
    "matmul",
    "ewise",
    "reduce",
    "add",
    "sub",
    "mul",
    "relu",
    "sigmoid",
    "scale",
    "tsum",
    "tmean",
    "backward",
    "finite_diff_check",
]


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class NumericError(ArithmeticError):
    """A value or operation result is NaN or infinite."""


class TapeError(RuntimeError):
    """Tape misuse: nesting, reuse after backward, or a value not on tape."""


def _ensure_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")


class Tensor:
    """Row-major float64 array, optionally linked into the active tape."""

    __slots__ = ("data", "node_id", "_gen")

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64, order="C")
        _ensure_finite(arr, "tensor data")
        self.data = arr
        self.node_id: Optional[int] = None
        self._gen = -1

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


# One active tape per thread: distinct tapes over read-only parameters may
# run fully in parallel, but a thread records onto a single tape at a time.
_tape_state = threading.local()
_gen_counter = itertools.count()


def _active() -> Optional["Tape"]:
    return getattr(_tape_state, "tape", None)


class TapeNode:
    """One recorded operation: kind, input ids, output id, saved values."""

    __slots__ = ("op", "inputs", "output", "saved")

    def __init__(self, op: str, inputs: tuple, output: int, saved: tuple):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.saved = saved


class Tape:
    """Ordered record of operations plus, after backward, a gradient map.

    Node ids are list indices, so the record is topologically sorted by
    construction: every input id precedes its consumer.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self.grads: dict[int, np.ndarray] = {}
        self._consumed = False
        self._gen = next(_gen_counter)

    def __enter__(self) -> "Tape":
        if _active() is not None:
            raise TapeError("nested tapes are unsupported")
        _tape_state.tape = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _tape_state.tape = None

    def _register(self, t: Tensor) -> int:
        """Return t's node id on this tape, adding a leaf node if needed."""
        if self._consumed:
            raise TapeError("tape already consumed by backward; reset() first")
        if t._gen == self._gen and t.node_id is not None:
            return t.node_id
        node_id = len(self.nodes)
        self.nodes.append(TapeNode("leaf", (), node_id, ()))
        t.node_id = node_id
        t._gen = self._gen
        return node_id

    def _record(self, op: str, inputs: tuple, out: Tensor, saved: tuple) -> None:
        ids = tuple(self._register(t) for t in inputs)
        node_id = len(self.nodes)
        self.nodes.append(TapeNode(op, ids, node_id, saved))
        out.node_id = node_id
        out._gen = self._gen

    def contains(self, t: Tensor) -> bool:
        """Whether t was recorded on this tape."""
        return t._gen == self._gen and t.node_id is not None

    def grad(self, t: Tensor) -> Optional[np.ndarray]:
        """Gradient of the backward root with respect to t, if recorded."""
        if t._gen != self._gen or t.node_id is None:
            return None
        return self.grads.get(t.node_id)

    def reset(self) -> None:
        self.nodes.clear()
        self.grads.clear()
        self._consumed = False
        self._gen = next(_gen_counter)


def _emit(op: str, inputs: tuple, out_data: np.ndarray, saved: tuple) -> Tensor:
    # Overflow to inf is caught by the finiteness check below, not by numpy.
    _ensure_finite(out_data, f"output of {op}")
    out = Tensor.__new__(Tensor)
    out.data = np.ascontiguousarray(out_data)
    out.node_id = None
    out._gen = -1
    tape = _active()
    if tape is not None:
        tape._record(op, inputs, out, saved)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Standard 2-D matrix product, recorded on the active tape."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    return _emit("matmul", (a, b), a.data @ b.data, (a.data, b.data))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def ewise(kind: str, a: Tensor, b: Union[Tensor, float, None] = None) -> Tensor:
    """Elementwise op. Binary kinds need equal shapes; `scale` takes a python
    scalar or a 1-element tensor (the latter participates in gradients)."""
    if kind in ("add", "sub", "mul"):
        if not isinstance(b, Tensor):
            raise ShapeError(f"ewise '{kind}' needs a tensor second operand")
        if a.shape != b.shape:
            raise ShapeError(f"ewise '{kind}' shape mismatch: {a.shape} vs {b.shape}")
        with np.errstate(over="ignore", invalid="ignore"):
            if kind == "add":
                return _emit("add", (a, b), a.data + b.data, ())
            if kind == "sub":
                return _emit("sub", (a, b), a.data - b.data, ())
            return _emit("mul", (a, b), a.data * b.data, (a.data, b.data))
    if kind == "relu":
        if b is not None:
            raise ShapeError("ewise 'relu' is unary")
        return _emit("relu", (a,), np.maximum(a.data, 0.0), (a.data,))
    if kind == "sigmoid":
        if b is not None:
            raise ShapeError("ewise 'sigmoid' is unary")
        out = _sigmoid(a.data)
        return _emit("sigmoid", (a,), out, (out,))
    if kind == "scale":
        if isinstance(b, Tensor):
            if b.size != 1:
                raise ShapeError(f"scale factor tensor must hold one value, got {b.shape}")
            k = float(b.data.reshape(-1)[0])
            return _emit("scale_t", (a, b), a.data * k, (a.data, k, b.data.shape))
        if b is None:
            raise ShapeError("ewise 'scale' needs a factor")
        return _emit("scale", (a,), a.data * float(b), (float(b),))
    raise ShapeError(f"unknown ewise kind '{kind}'")


def reduce(a: Tensor, axis: Optional[int], kind: str) -> Tensor:
    """Sum or mean over one axis, or over all entries when axis is None."""
    if kind not in ("sum", "mean"):
        raise ShapeError(f"unknown reduce kind '{kind}'")
    if axis is not None and not (0 <= axis < a.data.ndim):
        raise ShapeError(f"reduce axis {axis} out of range for shape {a.shape}")
    if kind == "sum":
        out = a.data.sum(axis=axis)
    else:
        out = a.data.mean(axis=axis)
    return _emit(f"reduce_{kind}", (a,), np.asarray(out), (a.shape, axis))


def add(a: Tensor, b: Tensor) -> Tensor:
    return ewise("add", a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return ewise("sub", a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return ewise("mul", a, b)


def relu(a: Tensor) -> Tensor:
    return ewise("relu", a)


def sigmoid(a: Tensor) -> Tensor:
    return ewise("sigmoid", a)


def scale(a: Tensor, k: Union[Tensor, float]) -> Tensor:
    return ewise("scale", a, k)


def tsum(a: Tensor, axis: Optional[int] = None) -> Tensor:
    return reduce(a, axis, "sum")


def tmean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    return reduce(a, axis, "mean")


def _expand(g: np.ndarray, shape: tuple, axis: Optional[int]) -> np.ndarray:
    if axis is None:
        return np.full(shape, float(np.asarray(g).reshape(-1)[0]))
    return np.broadcast_to(np.expand_dims(g, axis), shape).copy()


def _back_matmul(g, node):
    a, b = node.saved
    return (g @ b.T, a.T @ g)


def _back_add(g, node):
    return (g, g)


def _back_sub(g, node):
    return (g, -g)


def _back_mul(g, node):
    a, b = node.saved
    return (g * b, g * a)


def _back_relu(g, node):
    (a,) = node.saved
    return (np.where(a > 0, g, 0.0),)


def _back_sigmoid(g, node):
    (y,) = node.saved
    return (g * y * (1.0 - y),)


def _back_scale(g, node):
    (k,) = node.saved
    return (g * k,)


def _back_scale_t(g, node):
    a, k, b_shape = node.saved
    return (g * k, np.full(b_shape, float(np.sum(g * a))))


def _back_reduce_sum(g, node):
    shape, axis = node.saved
    return (_expand(g, shape, axis),)


def _back_reduce_mean(g, node):
    shape, axis = node.saved
    count = np.prod(shape) if axis is None else shape[axis]
    return (_expand(g, shape, axis) / count,)


_BACKWARD: dict[str, Callable] = {
    "matmul": _back_matmul,
    "add": _back_add,
    "sub": _back_sub,
    "mul": _back_mul,
    "relu": _back_relu,
    "sigmoid": _back_sigmoid,
    "scale": _back_scale,
    "scale_t": _back_scale_t,
    "reduce_sum": _back_reduce_sum,
    "reduce_mean": _back_reduce_mean,
}


def _sweep(tape: Tape, roots: list) -> dict[int, np.ndarray]:
    """Single reverse pass seeding each (tensor, weight) root; consumes the tape."""
    grads: dict[int, np.ndarray] = {}
    for root, seed in roots:
        if root._gen != tape._gen or root.node_id is None:
            raise TapeError("backward root is not on this tape")
        if root.data.size != 1:
            raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
        g0 = np.full(root.data.shape, float(seed))
        if root.node_id in grads:
            grads[root.node_id] = grads[root.node_id] + g0
        else:
            grads[root.node_id] = g0
    for node in reversed(tape.nodes):
        if node.op == "leaf" or node.output not in grads:
            continue
        in_grads = _BACKWARD[node.op](grads[node.output], node)
        for in_id, gi in zip(node.inputs, in_grads):
            if in_id in grads:
                grads[in_id] = grads[in_id] + gi
            else:
                grads[in_id] = np.array(gi, dtype=np.float64)
    tape.grads = grads
    tape._consumed = True
    return grads


def backward(s: Tensor, tape: Tape, seed: float = 1.0) -> dict[int, np.ndarray]:
    """Populate tape.grads with d(seed*s)/d(node) for every antecedent of s.

    The root must be a scalar recorded on the tape. The tape is consumed:
    further recording or backward calls require reset().
    """
    if tape._consumed:
        raise TapeError("tape already consumed by backward; reset() first")
    return _sweep(tape, [(s, seed)])


def backward_multi(roots: list, tape: Tape) -> dict[int, np.ndarray]:
    """Backward from several (scalar tensor, seed) roots in one sweep.

    Equivalent to accumulating backward(s_i, tape, seed_i) for each root;
    used by the trainer to push a whole batch through one tape.
    """
    if tape._consumed:
        raise TapeError("tape already consumed by backward; reset() first")
    return _sweep(tape, roots)


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between f's taped gradient at x and central differences.

    f must be deterministic and produce a finite scalar. Error per coordinate
    is |analytic - central| / (|central| + 1e-12).
    """
    with Tape() as tape:
        y = f(x)
    if y.data.size != 1:
        raise ShapeError("finite_diff_check needs a scalar-valued function")
    backward(y, tape)
    analytic = tape.grad(x)
    if analytic is None:
        analytic = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x).item()
        flat[i] = orig - eps
        lo = f(x).item()
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NumericError("non-finite function value during finite differences")
        central = (hi - lo) / (2.0 * eps)
        err = abs(analytic.reshape(-1)[i] - central) / (abs(central) + 1e-12)
        worst = max(worst, err)
    return worst
