"""Dense tensors and the reverse-mode gradient tape."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


_CHECK_FINITE = True


def set_finite_checks(enabled: bool) -> bool:
    """Toggle the NaN/Inf guard on every op. Returns the previous setting."""
    global _CHECK_FINITE
    previous = _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)
    return previous


def check_finite(array: np.ndarray, where: str) -> None:
    if _CHECK_FINITE and not np.isfinite(array).all():
        raise NonFiniteError(f"non-finite values produced by {where}")


class Tensor:
    """N-dimensional float array that can take part in a gradient tape.

    ``data`` is always a numpy array; ``grad`` is filled in by
    :func:`backward` for leaves (and for tensors with ``retain_grad`` set).
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "retain_grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.retain_grad = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    # operator sugar; implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other) if isinstance(other, Tensor) else ops.add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other) if isinstance(other, Tensor) else ops.add_scalar(self, -other)

    def __rsub__(self, other):
        from . import ops
        return ops.add_scalar(ops.scale(self, -1.0), other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other) if isinstance(other, Tensor) else ops.scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Node:
    """One recorded operation: inputs, output and the vector-Jacobian rule."""

    op: str
    inputs: tuple
    output: Tensor
    backward: BackwardFn


@dataclass
class Tape:
    """Ordered record of operations.

    Use as a context manager; ops executed inside the ``with`` block are
    appended in execution order, so inputs always precede their consumers.
    """

    nodes: list = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _ACTIVE.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.nodes)

    def produced(self, tensor: Tensor) -> bool:
        return any(n.output is tensor for n in self.nodes)


_ACTIVE: list[Tape] = []


def active_tape() -> Optional[Tape]:
    return _ACTIVE[-1] if _ACTIVE else None


@contextlib.contextmanager
def no_record():
    """Run ops without recording them on any tape."""
    saved = list(_ACTIVE)
    _ACTIVE.clear()
    try:
        yield
    finally:
        _ACTIVE.extend(saved)


def record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward: BackwardFn) -> Tensor:
    """Wrap ``out_data`` in a Tensor and log it on the active tape if needed."""
    check_finite(out_data, op)
    needs_grad = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs_grad)
    tape = active_tape()
    if tape is not None and needs_grad:
        tape.nodes.append(Node(op, tuple(inputs), out, backward))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Propagate d(loss)/d(.) through every node of ``tape``.

    Gradients from all paths are summed. Leaves (tensors not produced on the
    tape) with ``requires_grad`` accumulate into ``.grad``; intermediate
    tensors only keep theirs when ``retain_grad`` is set.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {id(n.output) for n in tape.nodes}
    if id(loss) not in produced:
        raise ValueError("loss tensor was not produced on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    owners: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        if node.output.retain_grad:
            node.output.grad = g if node.output.grad is None else node.output.grad + g
        in_grads = node.backward(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            check_finite(gi, f"backward of {node.op}")
            if gi.shape != inp.shape:
                raise ValueError(f"{node.op} backward produced grad {gi.shape} for input {inp.shape}")
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                owners[key] = inp

    for key, g in grads.items():
        t = owners[key]
        if key in produced and not t.retain_grad:
            continue
        t.grad = g.copy() if t.grad is None else t.grad + g


def tensor(data, requires_grad: bool = False, dtype=np.float64, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad, name=name)
