"""Tensor values and the gradient tape.

A :class:`Tensor` wraps a numpy array. Operations executed while a
:class:`Tape` is active (``with Tape() as tape:``) and touching at least one
tensor with ``requires_grad`` are appended to that tape together with their
backward rule; :meth:`Tape.backward` replays the records in reverse.
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Optional, Sequence

import numpy as np

from ..errors import ContractError, NonFiniteError

_DTYPE: contextvars.ContextVar = contextvars.ContextVar("swinvox_dtype", default=np.float32)
_TAPE: contextvars.ContextVar = contextvars.ContextVar("swinvox_tape", default=None)


def default_dtype() -> type:
    return _DTYPE.get()


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the dtype new tensors are created with.

    ``precision(np.float64)`` is the 64-bit mode used for gradient checks.
    """
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported scalar width {dtype}")
    token = _DTYPE.set(dtype)
    try:
        yield
    finally:
        _DTYPE.reset(token)


def active_tape() -> Optional["Tape"]:
    return _TAPE.get()


class Tensor:
    """An n-dimensional float array that may participate in a tape."""

    __slots__ = ("data", "requires_grad", "node_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind in "biuf" and arr.dtype != default_dtype():
            arr = arr.astype(default_dtype())
        if arr.ndim > 0 and 0 in arr.shape:
            raise ContractError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node_id: Optional[int] = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.node_id = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name, dtype=dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # Operator sugar; the implementations live in ops.
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

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)


def parameter(data, name: Optional[str] = None, dtype=None) -> Tensor:
    """A leaf tensor that receives gradients."""
    return Tensor(data, requires_grad=True, name=name, dtype=dtype)


@dataclass(frozen=True)
class Record:
    op: str
    inputs: tuple  # node id per input, None for untracked inputs
    output: int
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Gradients:
    """Gradient map returned by :meth:`Tape.backward`.

    Indexing with a tensor that never reached the loss yields zeros.
    """

    def __init__(self, grads: dict, tensors: dict):
        self._grads = grads
        self._tensors = tensors

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        g = self._grads.get(id(tensor))
        if g is None:
            return np.zeros_like(tensor.data)
        return g

    def __contains__(self, tensor: Tensor) -> bool:
        return id(tensor) in self._grads

    def __len__(self) -> int:
        return len(self._grads)


class Tape:
    """Ordered record of differentiable operations.

    Single-writer: a tape belongs to the thread (context) that entered it.
    """

    def __init__(self) -> None:
        self.records: list[Record] = []
        self._node_by_id: dict[int, int] = {}
        self._tensors: list[Tensor] = []  # keeps ids alive and unique
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE.reset(self._token)
        self._token = None

    def node_of(self, tensor: Tensor) -> Optional[int]:
        return self._node_by_id.get(id(tensor))

    def _register(self, tensor: Tensor) -> int:
        node = self._node_by_id.get(id(tensor))
        if node is None:
            node = len(self._tensors)
            self._node_by_id[id(tensor)] = node
            self._tensors.append(tensor)
        return node

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward) -> None:
        ids = tuple(self._register(t) if t.requires_grad else None for t in inputs)
        out = self._register(output)
        output.node_id = out
        self.records.append(Record(op, ids, out, backward))

    def backward(self, loss: Tensor) -> Gradients:
        """Reverse-mode sweep from a scalar ``loss``."""
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        root = self.node_of(loss)
        if root is None:
            raise ContractError("loss was not recorded on this tape")
        grads: dict[int, np.ndarray] = {root: np.ones_like(loss.data)}
        for rec in reversed(self.records):
            g = grads.get(rec.output)
            if g is None:
                continue
            in_grads = rec.backward(g)
            for node, gi in zip(rec.inputs, in_grads):
                if node is None or gi is None:
                    continue
                if not np.all(np.isfinite(gi)):
                    raise NonFiniteError(f"non-finite gradient in backward of '{rec.op}'")
                prev = grads.get(node)
                grads[node] = gi if prev is None else prev + gi
        by_tensor = {}
        for node, g in grads.items():
            t = self._tensors[node]
            if t.requires_grad:
                by_tensor[id(t)] = g.astype(t.data.dtype, copy=False)
        return Gradients(by_tensor, {id(t): t for t in self._tensors})

    def gradient(self, loss: Tensor, tensors: Iterable[Tensor]) -> list:
        grads = self.backward(loss)
        return [grads[t] for t in tensors]


def backward(loss: Tensor, tape: Optional[Tape] = None) -> Gradients:
    tape = tape if tape is not None else active_tape()
    if tape is None:
        raise ContractError("backward called with no active tape")
    return tape.backward(loss)
