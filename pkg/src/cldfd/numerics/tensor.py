"""Tensor value type and the reverse-mode tape.

A :class:`Tensor` wraps a numpy array. Every differentiable operation that
touches a tensor with ``requires_grad`` records a :class:`Node` carrying a
monotonically increasing sequence number; :func:`backward` collects the nodes
reachable from the loss into a :class:`Tape` ordered by that number and walks
it in exact reverse execution order.
"""
from __future__ import annotations

import contextlib
import itertools
import weakref
from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import ContractError

_DTYPE = np.float32
_GRAD_ENABLED = True
_SEQ = itertools.count()


def default_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the floating dtype new tensors are created with.

    Training runs in float32; gradient checking switches to float64 so the
    finite-difference oracle is not dominated by rounding.
    """
    global _DTYPE
    prev = _DTYPE
    _DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = prev


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_node", "_retain", "name", "__weakref__")

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._node: Optional[Node] = None
        self._retain = False
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def retain_grad(self) -> "Tensor":
        """Ask :func:`backward` to populate ``grad`` on this non-leaf tensor too."""
        self._retain = True
        return self

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def __len__(self):
        return len(self.data)


class Node:
    """One executed operation: its inputs, its output, and the vector-Jacobian rule."""

    __slots__ = ("seq", "inputs", "backward_fn", "op", "output_ref")

    def __init__(self, inputs: Sequence[Tensor], backward_fn: Callable, op: str):
        self.seq = next(_SEQ)
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn
        self.op = op
        self.output_ref = None


class Tape:
    """Executed nodes in execution order."""

    def __init__(self, nodes: Sequence[Node]):
        self.nodes = list(nodes)

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        seen = set()
        found = []
        stack = [loss._node] if loss._node is not None else []
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            found.append(node)
            for t in node.inputs:
                if t._node is not None and id(t._node) not in seen:
                    stack.append(t._node)
        found.sort(key=lambda n: n.seq)
        return cls(found)

    def __len__(self):
        return len(self.nodes)


def make_result(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap ``data`` and, if any input needs gradients, record it on the tape.

    ``backward_fn(grad_out)`` must return one gradient (or ``None``) per input.
    """
    out = Tensor(data)
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = Node(inputs, backward_fn, op)
        out._node = node
        node.output_ref = weakref.ref(out)
    return out


def backward(loss: Tensor, tape: Optional[Tape] = None) -> Tape:
    """Populate ``grad`` on every requires-grad leaf reachable from ``loss``.

    Leaf gradients accumulate into any existing ``grad`` buffer. Returns the
    tape that was traversed.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return Tape([])
    if tape is None:
        tape = Tape.from_loss(loss)

    pending = {}
    seed = np.ones_like(loss.data)
    if loss._node is None:
        _accumulate_leaf(loss, seed)
        return tape
    pending[id(loss._node)] = seed

    for node in reversed(tape.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.output_ref is not None:
            out = node.output_ref()
            if out is not None and out._retain:
                out.grad = g.copy() if out.grad is None else out.grad + g
        grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, grads):
            if gi is None or not t.requires_grad:
                continue
            if gi.shape != t.data.shape:
                gi = np.broadcast_to(gi, t.data.shape) if gi.size == 1 else gi.reshape(t.data.shape)
            if t._node is not None:
                key = id(t._node)
                prev = pending.get(key)
                pending[key] = gi if prev is None else prev + gi
            else:
                _accumulate_leaf(t, gi)
    return tape


def _accumulate_leaf(t: Tensor, g: np.ndarray):
    g = np.asarray(g, dtype=t.data.dtype)
    if t.grad is None:
        t.grad = np.array(g, copy=True)
    else:
        t.grad = t.grad + g
