"""Dense tensors recorded on an explicit reverse-mode tape.

Leaves (parameters, inputs) never belong to a tape; every tensor produced by
an operation while a :class:`Tape` is active and while some input requires a
gradient is appended to that tape.  Outside any active tape, operations run
without recording, which is how evaluation passes avoid bookkeeping.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from dasrf.errors import ContractError, TapeError

_PRECISIONS = {"f32": np.float32, "f64": np.float64}
_dtype = np.float32
_tape_stack: list["Tape"] = []


def set_precision(name: str) -> None:
    global _dtype
    if name not in _PRECISIONS:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_PRECISIONS)}")
    _dtype = _PRECISIONS[name]


def get_dtype():
    return _dtype


@contextlib.contextmanager
def precision(name: str):
    """Temporarily switch the default floating-point precision."""
    previous = _dtype
    set_precision(name)
    try:
        yield
    finally:
        globals()["_dtype"] = previous


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "tape", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or _dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.tape: Tape | None = None
        self.name = name

    # -- introspection -------------------------------------------------
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
    def dtype(self):
        return self.data.dtype

    @property
    def grad_handle(self) -> int | None:
        if self.tape is None:
            return None
        return self.tape.handle_of(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    def __len__(self):
        return self.data.shape[0]

    # -- operator sugar; implementations live in dasrf.tensor.ops ------
    def __add__(self, other):
        from dasrf.tensor import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from dasrf.tensor import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from dasrf.tensor import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from dasrf.tensor import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from dasrf.tensor import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from dasrf.tensor import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from dasrf.tensor import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from dasrf.tensor import ops
        return ops.div(other, self)

    def __neg__(self):
        from dasrf.tensor import ops
        return ops.neg(self)

    def __pow__(self, exponent):
        from dasrf.tensor import ops
        return ops.power(self, exponent)

    def __matmul__(self, other):
        from dasrf.tensor import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from dasrf.tensor import ops
        return ops.getitem(self, index)

    def reshape(self, *shape):
        from dasrf.tensor import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from dasrf.tensor import ops
        return ops.transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        from dasrf.tensor import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from dasrf.tensor import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


@dataclass
class Node:
    output: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Append-only list of recorded operations."""

    nodes: list[Node] = field(default_factory=list)
    _handles: dict[int, int] = field(default_factory=dict, repr=False)

    def __enter__(self):
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc):
        popped = _tape_stack.pop()
        assert popped is self

    def record(self, output: Tensor, inputs, backward) -> None:
        output.tape = self
        self._handles[id(output)] = len(self.nodes)
        self.nodes.append(Node(output, tuple(inputs), backward))

    def handle_of(self, tensor: Tensor) -> int | None:
        return self._handles.get(id(tensor))

    def leaves(self) -> list[Tensor]:
        seen: dict[int, Tensor] = {}
        for node in self.nodes:
            for t in node.inputs:
                if t.requires_grad and t.tape is None:
                    seen.setdefault(id(t), t)
        return list(seen.values())


def active_tape() -> Tape | None:
    return _tape_stack[-1] if _tape_stack else None


@contextlib.contextmanager
def no_grad():
    """Suspend recording, even inside an active tape."""
    saved = list(_tape_stack)
    _tape_stack.clear()
    try:
        yield
    finally:
        _tape_stack.extend(saved)


def record(out_data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    """Wrap ``out_data`` as a tensor and append a node when gradients are needed.

    ``backward(g)`` receives the output gradient and returns one gradient (or
    None) per input, each already reduced to that input's shape.
    """
    out = Tensor(out_data, dtype=np.result_type(out_data))
    if not any(t.requires_grad for t in inputs):
        return out
    tapes = {id(t.tape): t.tape for t in inputs if t.tape is not None}
    current = active_tape()
    if current is not None:
        tapes.setdefault(id(current), current)
    if len(tapes) > 1:
        raise TapeError("operation mixes tensors recorded on different tapes")
    if not tapes:
        return out
    (tape,) = tapes.values()
    out.requires_grad = True
    tape.record(out, inputs, backward)
    return out


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse sweep over ``tape``; returns gradients of every requires-grad leaf.

    Leaf gradients are also stored on ``leaf.grad`` (overwriting any previous
    buffer).  Leaves recorded on the tape but unreachable from ``loss`` get
    zero buffers.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.tape is not tape:
        raise TapeError("loss was not recorded on the given tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    result: dict[Tensor, np.ndarray] = {}
    for leaf in tape.leaves():
        g = grads.get(id(leaf))
        if g is None:
            g = np.zeros_like(leaf.data)
        g = np.asarray(g, dtype=leaf.data.dtype).reshape(leaf.shape)
        leaf.grad = g
        result[leaf] = g
    return result


def grad_of(fn: Callable[[], Tensor], wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Convenience: run ``fn`` on a fresh tape and return gradients for ``wrt``."""
    with Tape() as tape:
        loss = fn()
    got = backward(tape, loss)
    return [got.get(t, np.zeros_like(t.data)) for t in wrt]
