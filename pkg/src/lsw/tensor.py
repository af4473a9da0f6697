"""Dense tensors and a reverse-mode tape.

Operations in :mod:`lsw.ops` record themselves on the innermost active
:class:`Tape` whenever one of their inputs requires a gradient::

    with Tape() as tape:
        loss = ops.bce_loss(net.forward(x), y)
    backward(loss, tape)
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

_FLOAT_DTYPES = (np.float32, np.float64)


class AutodiffError(RuntimeError):
    """Raised for misuse of the tape (non-scalar loss, detached tape...)."""


class Tensor:
    """An n-dimensional float array with an optional gradient slot.

    Storage defaults to float32; float64 is kept when given explicitly so
    that gradient checks can run at double precision.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        if arr.dtype not in _FLOAT_DTYPES:
            raise TypeError(f"unsupported tensor dtype {arr.dtype}")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.data.dtype, name=self.name)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"


@dataclass
class _Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


_tape_stack: list["Tape"] = []


class Tape:
    """Ordered record of operations for one forward pass.

    Single-owner: record and backward on the same thread.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._outputs: set[int] = set()

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward_fn) -> None:
        self.nodes.append(_Node(tuple(inputs), output, backward_fn, op))
        self._outputs.add(id(output))

    def backward(self, loss: Tensor, wrt: Sequence[Tensor] | None = None):
        return backward(loss, self, wrt)


def active_tape() -> Tape | None:
    return _tape_stack[-1] if _tape_stack else None


def maybe_record(op: str, inputs: Sequence[Tensor], output: Tensor, backward_fn) -> Tensor:
    """Attach ``output`` to the active tape when any input needs a gradient."""
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        output.requires_grad = True
        tape.record(op, inputs, output, backward_fn)
    return output


def backward(loss: Tensor, tape: Tape, wrt: Sequence[Tensor] | None = None):
    """Reverse sweep from a scalar ``loss`` over ``tape``.

    Sets ``.grad`` on every gradient-requiring leaf the tape touched, and on
    each tensor in ``wrt`` (zeros when it is not on the path). Returns the
    list of gradients for ``wrt`` when given.
    """
    if loss.data.size != 1:
        raise AutodiffError(f"loss must be scalar, got shape {loss.shape}")
    if id(loss) not in tape._outputs:
        raise AutodiffError("loss was not produced on this tape (detached or recorded elsewhere)")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g_out = grads.pop(id(node.output), None)
        if g_out is None:
            continue
        in_grads = node.backward_fn(g_out)
        for t, g in zip(node.inputs, in_grads):
            if g is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
            if key not in tape._outputs:
                leaves[key] = t

    for key, t in leaves.items():
        t.grad = np.asarray(grads[key], dtype=t.dtype).reshape(t.shape)
    if wrt is None:
        return None
    out = []
    for t in wrt:
        if id(t) not in leaves:
            t.grad = np.zeros_like(t.data)
        out.append(t.grad)
    return out
