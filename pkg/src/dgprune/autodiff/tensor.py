"""Tensor and tape: the recording half of the reverse-mode engine.

Operations are recorded on the tape that is active on the current thread
(``with Tape() as tape:``). Outside a tape, operations run eagerly without
recording, which is what evaluation code wants.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

_local = threading.local()


class ShapeError(ValueError):
    """Operand shapes do not satisfy a primitive's rule."""


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense float64 array that can take part in a recorded computation."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "tape", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node_id: Optional[int] = None
        self.tape: Optional[Tape] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar; the primitives live in ops.py
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class _Record:
    inputs: tuple
    output: Tensor
    backward: BackwardFn
    op: str


@dataclass
class Tape:
    """Ordered log of operations; replayed in reverse by :meth:`backward`.

    ``backward`` consumes the log. A tape must not be shared across threads.
    """

    records: list = field(default_factory=list)
    _next_id: int = 0

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def _register(self, t: Tensor) -> None:
        if t.tape is not self:
            t.tape = self
            t.node_id = self._next_id
            self._next_id += 1

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward: BackwardFn) -> None:
        for t in inputs:
            self._register(t)
        self._register(output)
        self.records.append(_Record(tuple(inputs), output, backward, op))

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.tape is not self:
            raise ValueError("loss was not recorded on this tape")
        pending: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for rec in reversed(self.records):
            g = pending.pop(rec.output.node_id, None)
            if g is None:
                continue
            _accumulate(rec.output, g)
            in_grads = rec.backward(g)
            for t, gi in zip(rec.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if gi.shape != t.shape:
                    raise ShapeError(f"{rec.op}: backward produced {gi.shape} for input of shape {t.shape}")
                prev = pending.get(t.node_id)
                pending[t.node_id] = gi if prev is None else prev + gi
                leaves[t.node_id] = t
        # whatever is still pending was never produced by a record: a leaf
        for nid, g in pending.items():
            _accumulate(leaves[nid], g)
        # the tape is consumed; dropping the log breaks tensor <-> tape cycles
        self.records = []


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g  # in place: parameter grads are views into a flat buffer


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every tensor reachable from ``loss``."""
    if loss.tape is None:
        raise ValueError("loss has no tape; run the forward pass inside `with Tape():`")
    loss.tape.backward(loss)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)
