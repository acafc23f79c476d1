"""Reverse-mode automatic differentiation over dense float64 arrays.

The engine is built around an explicit :class:`Tape`: every primitive
executed while a tape is active (and touching at least one watched value)
appends a node holding the saved inputs and a vector-Jacobian closure.
Because the closures are themselves written in terms of the same
primitives, a backward pass run with ``create_graph=True`` records new
nodes, so a second backward pass can differentiate *through* the first.
That is what lets an outer objective's gradient flow back into
hyperparameters that shaped earlier gradient-based parameter updates.

Only the small op set needed by the rest of the package is provided.
General broadcasting beyond numpy's elementwise rules, GPU execution and
sparse tensors are deliberately absent.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class DiffError(Exception):
    """Base class for failures raised by this module."""


class NumericFault(DiffError):
    """A primitive produced a NaN or Inf."""


class TapeError(DiffError):
    """Structural misuse: value not on the tape, wrong shape, mismatch."""


# ---------------------------------------------------------------------------
# Tape machinery
# ---------------------------------------------------------------------------

_TAPE_STACK: list["Tape | None"] = []


def _active_tape() -> "Tape | None":
    return _TAPE_STACK[-1] if _TAPE_STACK else None


@contextmanager
def pause_recording():
    """Suspend recording inside the block (ops run as plain numpy)."""
    _TAPE_STACK.append(None)
    try:
        yield
    finally:
        _TAPE_STACK.pop()


class _Node:
    __slots__ = ("op", "parents", "vjp", "needs", "tape", "idx")

    def __init__(self, op, parents, vjp, needs, tape, idx):
        self.op = op
        self.parents = parents
        self.vjp = vjp          # callable(grad_out, needs) -> tuple of grads
        self.needs = needs      # which parents can receive gradient
        self.tape = tape
        self.idx = idx


def _check_finite(arr: np.ndarray, op: str) -> None:
    # A sum is non-finite iff the array contains a NaN/Inf; re-check precisely
    # to avoid flagging a finite array whose sum merely overflowed.
    s = arr.sum()
    if not np.isfinite(s) and not np.isfinite(arr).all():
        raise NumericFault(f"non-finite values produced by op '{op}'")


class Tensor:
    """Dense float64 value, optionally linked to a node on the active tape."""

    __slots__ = ("data", "node")

    def __init__(self, data, node: _Node | None = None):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, "tensor")
        self.data = arr
        self.node = node

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = "" if self.node is None else f", node={self.node.op}@{self.node.idx}"
        return f"Tensor({self.data!r}{tag})"

    # arithmetic sugar; every overload routes through the recorded primitives
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def stop_gradient(x: Tensor) -> Tensor:
    """Return the same value detached from any tape."""
    return Tensor(_lift(x).data, None)


def _record(op: str, out_data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    _check_finite(out_data, op)
    tape = _active_tape()
    if tape is None:
        return Tensor(out_data, None)
    needs = tuple(p.node is not None and p.node.tape is tape for p in parents)
    if not any(needs):
        return Tensor(out_data, None)
    node = _Node(op, parents, vjp, needs, tape, len(tape.nodes))
    tape.nodes.append(node)
    return Tensor(out_data, node)


class Tape:
    """Append-only record of primitive operations.

    Node order is creation order, which is a topological order of the
    computation; the backward walk visits nodes in strictly decreasing
    index so every consumer is processed before its inputs. Two backward
    passes over the same tape yield bitwise-identical gradients.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.checkpoints: list[int] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPE_STACK.pop()
        assert popped is self

    def watch(self, value) -> Tensor:
        """Register a value as a differentiable leaf of this tape."""
        t = _lift(value)
        if t.node is not None and t.node.tape is self:
            return t
        node = _Node("leaf", (), None, (), self, len(self.nodes))
        self.nodes.append(node)
        return Tensor(t.data, node)

    def checkpoint(self) -> None:
        """Mark an inner-update boundary (diagnostic only)."""
        self.checkpoints.append(len(self.nodes))

    def grad(
        self,
        output: Tensor,
        wrt: Sequence[Tensor] | Tensor,
        create_graph: bool = False,
    ) -> list[Tensor]:
        """Gradients of a scalar ``output`` with respect to ``wrt`` tensors.

        Tensors that do not influence ``output`` receive zero gradients.
        With ``create_graph=True`` the backward pass is itself recorded on
        this tape (which must then be the active one), so the returned
        gradients can be differentiated again.
        """
        single = isinstance(wrt, Tensor)
        wrt_list = [wrt] if single else list(wrt)
        if output.node is None or output.node.tape is not self:
            raise TapeError("output is not recorded on this tape")
        if output.data.shape != ():
            raise TapeError(f"gradient source must be scalar, got shape {output.data.shape}")
        for w in wrt_list:
            if w.node is None or w.node.tape is not self:
                raise TapeError("a wrt tensor does not appear on this tape")
        if create_graph and _active_tape() is not self:
            raise TapeError("create_graph=True requires this tape to be active")

        grads: dict[_Node, Tensor] = {output.node: Tensor(np.ones(()))}
        lowest = min(w.node.idx for w in wrt_list)
        # Snapshot the range: nodes appended during a create_graph backward
        # get higher indices and are intentionally not revisited here.
        for idx in range(output.node.idx, lowest - 1, -1):
            node = self.nodes[idx]
            g = grads.get(node)
            if g is None or node.vjp is None:
                continue
            if create_graph:
                contribs = node.vjp(g, node.needs)
            else:
                with pause_recording():
                    contribs = node.vjp(g, node.needs)
            for parent, need, contrib in zip(node.parents, node.needs, contribs):
                if not need or contrib is None:
                    continue
                pn = parent.node
                acc = grads.get(pn)
                if acc is None:
                    grads[pn] = contrib
                elif create_graph:
                    grads[pn] = add(acc, contrib)
                else:
                    grads[pn] = Tensor(acc.data + contrib.data)
        out = []
        for w in wrt_list:
            g = grads.get(w.node)
            out.append(Tensor(np.zeros_like(w.data)) if g is None else g)
        return out[0] if single else out


def record_forward(tape: Tape, fn: Callable, inputs: Iterable) -> Tensor:
    """Run ``fn`` on watched copies of ``inputs`` with ``tape`` active."""
    with tape:
        watched = [tape.watch(x) for x in inputs]
        return fn(*watched)


def grad(tape: Tape, output: Tensor, wrt, create_graph: bool = False):
    return tape.grad(output, wrt, create_graph=create_graph)


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def _unbroadcast(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Reduce ``g`` back to ``shape`` by summing the broadcast axes."""
    if g.data.shape == shape:
        return g
    extra = g.data.ndim - len(shape)
    if extra > 0:
        g = tsum(g, axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.data.shape[i] != 1)
    if axes:
        g = tsum(g, axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def vjp(g, needs):
        return (
            _unbroadcast(g, a.data.shape) if needs[0] else None,
            _unbroadcast(g, b.data.shape) if needs[1] else None,
        )

    return _record("add", a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def vjp(g, needs):
        return (
            _unbroadcast(g, a.data.shape) if needs[0] else None,
            _unbroadcast(neg(g), b.data.shape) if needs[1] else None,
        )

    return _record("sub", a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def vjp(g, needs):
        return (
            _unbroadcast(mul(g, b), a.data.shape) if needs[0] else None,
            _unbroadcast(mul(g, a), b.data.shape) if needs[1] else None,
        )

    return _record("mul", a.data * b.data, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = a.data / b.data

    def vjp(g, needs):
        da = _unbroadcast(div(g, b), a.data.shape) if needs[0] else None
        db = None
        if needs[1]:
            db = _unbroadcast(neg(div(mul(g, a), mul(b, b))), b.data.shape)
        return (da, db)

    return _record("div", out_data, (a, b), vjp)


def neg(a) -> Tensor:
    a = _lift(a)

    def vjp(g, needs):
        return (neg(g),)

    return _record("neg", -a.data, (a,), vjp)


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise TapeError("matmul expects 2-D operands")

    def vjp(g, needs):
        return (
            matmul(g, transpose(b)) if needs[0] else None,
            matmul(transpose(a), g) if needs[1] else None,
        )

    return _record("matmul", a.data @ b.data, (a, b), vjp)


def transpose(a) -> Tensor:
    a = _lift(a)
    if a.data.ndim != 2:
        raise TapeError("transpose expects a 2-D operand")

    def vjp(g, needs):
        return (transpose(g),)

    return _record("transpose", a.data.T.copy(), (a,), vjp)


def affine(x, w, b) -> Tensor:
    """Fused ``x @ w + b`` with a row-vector bias."""
    x, w, b = _lift(x), _lift(w), _lift(b)
    if x.data.ndim != 2 or w.data.ndim != 2 or b.data.ndim != 1:
        raise TapeError("affine expects x (n,d), w (d,m), b (m,)")

    def vjp(g, needs):
        return (
            matmul(g, transpose(w)) if needs[0] else None,
            matmul(transpose(x), g) if needs[1] else None,
            tsum(g, axis=0) if needs[2] else None,
        )

    return _record("affine", x.data @ w.data + b.data, (x, w, b), vjp)


def relu(a) -> Tensor:
    a = _lift(a)
    mask = (a.data > 0.0).astype(np.float64)  # subgradient at 0 is 0

    def vjp(g, needs):
        return (mul(g, Tensor(mask)),)

    return _record("relu", a.data * mask, (a,), vjp)


def exp(a) -> Tensor:
    # The vjp references the *recorded* output via a late-bound cell, so a
    # create_graph backward keeps the dependence on the input (second order).
    a = _lift(a)
    cell: list[Tensor] = []

    def vjp(g, needs):
        return (mul(g, cell[0]),)

    res = _record("exp", np.exp(a.data), (a,), vjp)
    cell.append(res)
    return res


def log(a) -> Tensor:
    a = _lift(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = np.log(a.data)

    def vjp(g, needs):
        return (div(g, a),)

    return _record("log", out_data, (a,), vjp)


def tanh(a) -> Tensor:
    a = _lift(a)
    cell: list[Tensor] = []

    def vjp(g, needs):
        return (mul(g, sub(1.0, mul(cell[0], cell[0]))),)

    res = _record("tanh", np.tanh(a.data), (a,), vjp)
    cell.append(res)
    return res


def sigmoid(a) -> Tensor:
    a = _lift(a)
    cell: list[Tensor] = []

    def vjp(g, needs):
        return (mul(g, mul(cell[0], sub(1.0, cell[0]))),)

    res = _record("sigmoid", 1.0 / (1.0 + np.exp(-a.data)), (a,), vjp)
    cell.append(res)
    return res


def sqrt(a) -> Tensor:
    a = _lift(a)
    cell: list[Tensor] = []

    def vjp(g, needs):
        return (div(g, mul(2.0, cell[0])),)

    res = _record("sqrt", np.sqrt(a.data), (a,), vjp)
    cell.append(res)
    return res


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp into [lo, hi]; gradient passes only strictly inside the bounds."""
    a = _lift(a)
    mask = ((a.data > lo) & (a.data < hi)).astype(np.float64)

    def vjp(g, needs):
        return (mul(g, Tensor(mask)),)

    return _record("clip", np.clip(a.data, lo, hi), (a,), vjp)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g, needs):
        if axis is None:
            gg = reshape(g, (1,) * a.data.ndim) if a.data.ndim else g
        elif not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            kept = list(a.data.shape)
            for ax in axes:
                kept[ax] = 1
            gg = reshape(g, tuple(kept))
        else:
            gg = g
        return (broadcast_to(gg, a.data.shape),)

    return _record("sum", out, (a,), vjp)


def tmean(a, axis=None) -> Tensor:
    a = _lift(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis), 1.0 / n)


def sum_sq(a) -> Tensor:
    """Scalar sum of squared entries."""
    a = _lift(a)

    def vjp(g, needs):
        return (mul(a, mul(2.0, g)),)

    return _record("sum_sq", np.float64((a.data * a.data).sum()), (a,), vjp)


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    old = a.data.shape

    def vjp(g, needs):
        return (reshape(g, old),)

    return _record("reshape", a.data.reshape(shape), (a,), vjp)


def broadcast_to(a, shape) -> Tensor:
    a = _lift(a)
    old = a.data.shape

    def vjp(g, needs):
        return (_unbroadcast(g, old),)

    return _record("broadcast_to", np.broadcast_to(a.data, shape).copy(), (a,), vjp)


def take_rows(a, idx) -> Tensor:
    """Pick one entry per row: ``out[i] = a[i, idx[i]]``."""
    a = _lift(a)
    idx = np.asarray(idx, dtype=np.intp)
    rows = np.arange(a.data.shape[0])

    def vjp(g, needs):
        return (put_rows(g, idx, a.data.shape),)

    return _record("take_rows", a.data[rows, idx], (a,), vjp)


def put_rows(g, idx, shape) -> Tensor:
    """Scatter a per-row vector into a zero matrix (adjoint of take_rows)."""
    g = _lift(g)
    idx = np.asarray(idx, dtype=np.intp)
    out = np.zeros(shape)
    out[np.arange(shape[0]), idx] = g.data

    def vjp(gg, needs):
        return (take_rows(gg, idx),)

    return _record("put_rows", out, (g,), vjp)


def log_softmax(z) -> Tensor:
    """Row-wise log-softmax of a 2-D logits matrix."""
    z = _lift(z)
    if z.data.ndim != 2:
        raise TapeError("log_softmax expects a 2-D operand")
    shifted = z.data - z.data.max(axis=1, keepdims=True)
    out_data = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    cell: list[Tensor] = []

    def vjp(g, needs):
        p = exp(cell[0])
        return (sub(g, mul(p, tsum(g, axis=1, keepdims=True))),)

    res = _record("log_softmax", out_data, (z,), vjp)
    cell.append(res)
    return res


# ---------------------------------------------------------------------------
# Optimizer steps and unroll bookkeeping
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Bias-corrected Adam moments for a list of parameter tensors."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-4

    @classmethod
    def init(cls, params: Sequence, beta1=0.9, beta2=0.999, eps=1e-4) -> "AdamState":
        shapes = [(_lift(p)).data.shape for p in params]
        return cls(
            m=[np.zeros(s) for s in shapes],
            v=[np.zeros(s) for s in shapes],
            step_count=0,
            beta1=beta1,
            beta2=beta2,
            eps=eps,
        )


def adam_step(
    params: Sequence, grads: Sequence, state: AdamState, lr: float
) -> tuple[list[Tensor], AdamState]:
    """One Adam update, expressed with recorded primitives.

    Functional: returns fresh parameter tensors and a fresh state. When no
    tape is active this runs as plain numpy; when the inputs are watched the
    whole step is differentiable.
    """
    params = [_lift(p) for p in params]
    grads = [_lift(g) for g in grads]
    if len(params) != len(grads) or len(params) != len(state.m):
        raise TapeError("adam_step: params/grads/state length mismatch")
    for p, g, m in zip(params, grads, state.m):
        if p.data.shape != g.data.shape or p.data.shape != m.shape:
            raise TapeError("adam_step: shape mismatch")
    t = state.step_count + 1
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    new_params: list[Tensor] = []
    new_m: list[np.ndarray] = []
    new_v: list[np.ndarray] = []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        mt = add(mul(state.beta1, Tensor(m)), mul(1.0 - state.beta1, g))
        vt = add(mul(state.beta2, Tensor(v)), mul(1.0 - state.beta2, mul(g, g)))
        m_hat = div(mt, c1)
        v_hat = div(vt, c2)
        step = div(mul(lr, m_hat), add(sqrt(v_hat), state.eps))
        new_params.append(sub(p, step))
        new_m.append(mt.data)
        new_v.append(vt.data)
    new_state = AdamState(
        m=new_m,
        v=new_v,
        step_count=t,
        beta1=state.beta1,
        beta2=state.beta2,
        eps=state.eps,
    )
    return new_params, new_state


def sgd_step(params: Sequence, grads: Sequence, lr: float) -> list[Tensor]:
    """Plain gradient step expressed with recorded primitives."""
    params = [_lift(p) for p in params]
    grads = [_lift(g) for g in grads]
    if len(params) != len(grads):
        raise TapeError("sgd_step: params/grads length mismatch")
    return [sub(p, mul(lr, g)) for p, g in zip(params, grads)]


@dataclass
class UnrollStep:
    """One recorded inner update: parameters in, data, hyper tensors used."""

    theta_before: list[Tensor]
    data: object
    eta: dict[str, Tensor] = field(default_factory=dict)


@dataclass
class UnrollTrace:
    """The recorded K-step unroll an outer loss differentiates through."""

    tape: Tape
    steps: list[UnrollStep] = field(default_factory=list)
    theta_final: list[Tensor] = field(default_factory=list)

    def add(self, theta_before, data, eta) -> None:
        self.tape.checkpoint()
        self.steps.append(UnrollStep(list(theta_before), data, dict(eta)))


def grad_through_updates(
    trace: UnrollTrace, outer_loss: Tensor, wrt_meta: Sequence[Tensor]
) -> list[Tensor]:
    """Gradient of an outer loss w.r.t. meta values through recorded updates."""
    if not trace.steps:
        raise TapeError("trace records no inner updates")
    if outer_loss.node is None or outer_loss.node.tape is not trace.tape:
        raise TapeError("outer loss is not recorded on the trace's tape")
    return trace.tape.grad(outer_loss, list(wrt_meta))
