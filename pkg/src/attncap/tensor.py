"""Dense tensors with reverse-mode automatic differentiation.

Small, auditable tape-based engine: every differentiable op runs its numpy
forward immediately and, when a :class:`Tape` is active and gradients are
wanted, appends one node holding the backward closure.  ``backward(tape)``
replays the nodes in reverse, so the visit order is the exact reverse of
execution order (a valid reverse-topological order by construction).

Scope is deliberately narrow: 0/1/2-D float tensors, the single broadcast
pattern the attention arithmetic needs (a length-m vector scaled across the
columns of an m x n matrix), and first derivatives only.
"""

from __future__ import annotations

import math
from typing import Callable, Optional

import numpy as np

DTYPE = np.float64


class ShapeMismatch(ValueError):
    """Operand shapes violate an op's contact (caller bug)."""


class DomainError(ValueError):
    """Operand value outside an op's domain, e.g. log of a non-positive."""


class IndexOutOfRange(IndexError):
    """Integer index outside the valid range for a lookup op."""


class NonFiniteValue(FloatingPointError):
    """A forward op produced NaN/Inf; overflow is an error, never a value."""


class NonScalarRoot(ValueError):
    """backward() was asked to start from a non-scalar tensor."""


class DoubleBackward(RuntimeError):
    """backward() called twice on the same tape without rebuilding it."""


class Tensor:
    """A dense row-major float array plus gradient bookkeeping.

    ``grad`` is ``None`` until some backward pass deposits into it; it then
    always has the same shape as ``data``.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim > 0 and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatch(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class TapeNode:
    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op: str, inputs: tuple, output: Tensor, backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Execution-ordered record of one forward pass.

    Used as a context manager; ops executed inside record themselves when any
    input requires grad.  A tape can be backpropagated exactly once.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _tape_stack.pop()
        assert popped is self


_tape_stack: list[Tape] = []


def _active_tape() -> Optional[Tape]:
    return _tape_stack[-1] if _tape_stack else None


def _finish(op: str, out_data: np.ndarray, inputs: tuple, backward_fn: Callable, check: bool = True) -> Tensor:
    # Sum-based finiteness probe: any NaN/Inf in out_data makes the sum
    # non-finite, and operands stay far too small for a spurious overflow.
    # Ops whose output is range-bounded for finite input (sigmoid, softmax,
    # tanh, pure copies) skip the probe.
    if check and not math.isfinite(float(out_data.sum())):
        raise NonFiniteValue(f"{op} produced a non-finite value")
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires)
    tape = _active_tape()
    if requires and tape is not None:
        tape.nodes.append(TapeNode(op, inputs, out, backward_fn))
    return out


def backward(tape: Tape, root: Optional[Tensor] = None) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from ``root``.

    ``root`` defaults to the output of the last recorded node and must be a
    scalar; its gradient w.r.t. itself is seeded as 1.  Each node is visited
    exactly once, in reverse execution order.
    """
    if tape.consumed:
        raise DoubleBackward("tape already backpropagated; rebuild the forward pass")
    tape.consumed = True
    if root is None:
        if not tape.nodes:
            return
        root = tape.nodes[-1].output
    if root.size != 1:
        raise NonScalarRoot(f"root has shape {root.shape}; expected a scalar")
    root.grad = np.ones_like(root.data)
    for node in reversed(tape.nodes):
        g = node.output.grad
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.grad is None:
                inp.grad = gi  # backward fns hand over freshly built arrays
            else:
                inp.grad += gi


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for (m,k)@(k,n), (m,k)@(k,) and (k,)@(k,n)."""
    ad, bd = a.data, b.data
    if ad.ndim == 0 or bd.ndim == 0 or ad.ndim > 2 or bd.ndim > 2:
        raise ShapeMismatch(f"matmul supports 1-D/2-D operands, got {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[0]:
        raise ShapeMismatch(f"inner dimensions differ: {ad.shape} @ {bd.shape}")

    out_data = ad @ bd

    def bwd(g: np.ndarray):
        if ad.ndim == 2 and bd.ndim == 2:
            return g @ bd.T, ad.T @ g
        if ad.ndim == 2 and bd.ndim == 1:
            return g[:, None] * bd, ad.T @ g
        # (k,) @ (k,n)
        return bd @ g, ad[:, None] * g

    return _finish("matmul", out_data, (a, b), bwd)


def softmax_scaled(scores: Tensor, scale: float) -> Tensor:
    """softmax(scores / scale) over a 1-D score vector, max-stabilized."""
    if scores.data.ndim != 1 or scores.size < 1:
        raise ShapeMismatch(f"softmax_scaled expects a nonempty vector, got {scores.shape}")
    if not scale > 0:
        raise DomainError(f"scale must be positive, got {scale}")
    z = scores.data / scale
    z = z - z.max()
    e = np.exp(z)
    p = e / e.sum()

    def bwd(g: np.ndarray):
        gp = g * p
        return ((gp - p * gp.sum()) / scale,)

    return _finish("softmax_scaled", p, (scores,), bwd, check=False)


def _broadcast_pair(a: Tensor, b: Tensor):
    """Resolve the one permitted broadcast: m-vector across columns of m x n.

    Returns (a_data, b_data, reduce_a_axis, reduce_b_axis) where the reduce
    axis says which axis the corresponding operand's gradient must be summed
    over (None for no broadcast).
    """
    ad, bd = a.data, b.data
    if ad.shape == bd.shape:
        return ad, bd, None, None
    if ad.ndim == 2 and bd.ndim == 1 and bd.shape[0] == ad.shape[0]:
        return ad, bd[:, None], None, 1
    if bd.ndim == 2 and ad.ndim == 1 and ad.shape[0] == bd.shape[0]:
        return ad[:, None], bd, 1, None
    raise ShapeMismatch(f"shapes {ad.shape} and {bd.shape} are not broadcast-compatible")


def add(a: Tensor, b: Tensor) -> Tensor:
    ad, bd, ra, rb = _broadcast_pair(a, b)
    out_data = ad + bd

    def bwd(g: np.ndarray):
        ga = g.sum(axis=ra) if ra is not None else g.copy()
        gb = g.sum(axis=rb) if rb is not None else g.copy()
        return ga, gb

    return _finish("add", out_data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; a length-m vector rescales the rows of an m x n
    matrix (each row i multiplied by vector[i]), the broadcast the attention
    rescaling needs."""
    ad, bd, ra, rb = _broadcast_pair(a, b)
    out_data = ad * bd

    def bwd(g: np.ndarray):
        ga = g * bd
        gb = g * ad
        if ra is not None:
            ga = ga.sum(axis=ra)
        if rb is not None:
            gb = gb.sum(axis=rb)
        return ga, gb

    return _finish("mul", out_data, (a, b), bwd)


def mul_scalar(a: Tensor, c: float) -> Tensor:
    out_data = a.data * c

    def bwd(g: np.ndarray):
        return (g * c,)

    return _finish("mul_scalar", out_data, (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # stable for both tails: exp argument is always <= 0
    e = np.exp(-np.abs(x))
    out_data = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def bwd(g: np.ndarray):
        return (g * out_data * (1.0 - out_data),)

    return _finish("sigmoid", out_data, (a,), bwd, check=False)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def bwd(g: np.ndarray):
        return (g * (1.0 - out_data * out_data),)

    return _finish("tanh", out_data, (a,), bwd, check=False)


def log(a: Tensor) -> Tensor:
    if not (a.data > 0).all():
        raise DomainError("log requires strictly positive operand")
    out_data = np.log(a.data)

    def bwd(g: np.ndarray):
        return (g / a.data,)

    return _finish("log", out_data, (a,), bwd)


def reduce_sum(a: Tensor, axis: Optional[int] = None) -> Tensor:
    if axis is not None and not (0 <= axis < a.data.ndim):
        raise ShapeMismatch(f"axis {axis} invalid for shape {a.shape}")
    out_data = np.asarray(a.data.sum(axis=axis))

    def bwd(g: np.ndarray):
        if axis is None:
            return (np.full_like(a.data, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy(),)

    return _finish("reduce_sum", out_data, (a,), bwd)


def reduce_mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    if axis is not None and not (0 <= axis < a.data.ndim):
        raise ShapeMismatch(f"axis {axis} invalid for shape {a.shape}")
    n = a.data.size if axis is None else a.data.shape[axis]
    out_data = np.asarray(a.data.mean(axis=axis))

    def bwd(g: np.ndarray):
        if axis is None:
            return (np.full_like(a.data, float(g) / n),)
        return (np.broadcast_to(np.expand_dims(g / n, axis), a.data.shape).copy(),)

    return _finish("reduce_mean", out_data, (a,), bwd)


def concat(a: Tensor, b: Tensor, axis: int = 0) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim != bd.ndim or not (0 <= axis < ad.ndim):
        raise ShapeMismatch(f"concat of {ad.shape} and {bd.shape} along axis {axis}")
    for dim in range(ad.ndim):
        if dim != axis and ad.shape[dim] != bd.shape[dim]:
            raise ShapeMismatch(f"concat of {ad.shape} and {bd.shape} along axis {axis}")
    out_data = np.concatenate([ad, bd], axis=axis)
    split = ad.shape[axis]

    def bwd(g: np.ndarray):
        if axis == 0:
            return g[:split].copy(), g[split:].copy()
        moved = np.moveaxis(g, axis, 0)
        ga = np.moveaxis(moved[:split], 0, axis).copy()
        gb = np.moveaxis(moved[split:], 0, axis).copy()
        return ga, gb

    return _finish("concat", out_data, (a, b), bwd, check=False)


def embed_lookup(table: Tensor, index: int) -> Tensor:
    """Row ``index`` of a (V, d) table; gradient lands only in that row."""
    if table.data.ndim != 2:
        raise ShapeMismatch(f"embed_lookup expects a 2-D table, got {table.shape}")
    index = int(index)
    if not 0 <= index < table.data.shape[0]:
        raise IndexOutOfRange(f"index {index} outside table of {table.data.shape[0]} rows")
    out_data = table.data[index].copy()

    def bwd(g: np.ndarray):
        gt = np.zeros_like(table.data)
        gt[index] = g
        return (gt,)

    return _finish("embed_lookup", out_data, (table,), bwd, check=False)


def slice1d(a: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous segment [start, stop) of a vector."""
    if a.data.ndim != 1:
        raise ShapeMismatch(f"slice1d expects a vector, got {a.shape}")
    if not 0 <= start < stop <= a.data.shape[0]:
        raise IndexOutOfRange(f"slice [{start}:{stop}) outside vector of {a.data.shape[0]}")
    out_data = a.data[start:stop].copy()

    def bwd(g: np.ndarray):
        ga = np.zeros_like(a.data)
        ga[start:stop] = g
        return (ga,)

    return _finish("slice1d", out_data, (a,), bwd, check=False)


def cross_entropy_logits(logits: Tensor, target: int) -> Tensor:
    """-log softmax(logits)[target], computed via log-sum-exp.

    Fused so extreme logits never round a probability to zero before the log.
    """
    z = logits.data
    if z.ndim != 1:
        raise ShapeMismatch(f"cross_entropy_logits expects a vector, got {logits.shape}")
    target = int(target)
    if not 0 <= target < z.shape[0]:
        raise IndexOutOfRange(f"target {target} outside {z.shape[0]} classes")
    m = z.max()
    e = np.exp(z - m)
    se = e.sum()
    out_data = np.asarray(math.log(se) + m - z[target])

    def bwd(g: np.ndarray):
        gz = e / se * float(g)
        gz[target] -= float(g)
        return (gz,)

    return _finish("cross_entropy_logits", out_data, (logits,), bwd, check=False)
