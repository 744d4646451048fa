"""Tensor, tape and reverse-mode backward pass.

A `Tensor` wraps a numpy array. Every primitive that consumes a tensor with
``requires_grad`` returns a tensor remembering its parents and a closure that
maps the upstream gradient to one gradient per parent. `backward` linearises
that graph into a `Tape` and replays it in reverse.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from ..errors import NonFiniteError, ShapeError

_ids = itertools.count()

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "id", "op", "_parents", "_backward")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, *, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.id = next(_ids)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None

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
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operator sugar; implementations live in ops.py ----------------
    def __add__(self, other):
        return _ops().add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return _ops().sub(self, other)

    def __rsub__(self, other):
        return _ops().sub(other, self)

    def __mul__(self, other):
        return _ops().mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _ops().div(self, other)

    def __rtruediv__(self, other):
        return _ops().div(other, self)

    def __neg__(self):
        return _ops().neg(self)

    def __pow__(self, exponent):
        return _ops().pow(self, exponent)

    def __matmul__(self, other):
        return _ops().matmul(self, other)

    def __rmatmul__(self, other):
        return _ops().matmul(other, self)

    def __getitem__(self, index):
        return _ops().getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return _ops().sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return _ops().mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _ops().reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return _ops().transpose(self, axes or None)

    @property
    def T(self):
        return _ops().transpose(self, None)


def _ops():
    from . import ops

    return ops


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def make_result(data: np.ndarray, parents: Iterable[Tensor], backward: BackwardFn, op: str) -> Tensor:
    """Wrap a primitive's output and register its backward rule."""
    parents = tuple(parents)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op}: non-finite value in forward output")
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def check_finite_leaf(t: Tensor, op: str) -> None:
    if t.is_leaf and not np.all(np.isfinite(t.data)):
        raise NonFiniteError(f"{op}: non-finite input (tensor #{t.id}, shape {t.shape})")


@dataclass(frozen=True)
class TapeEntry:
    index: int
    op: str
    input_ids: tuple[int, ...]
    output_id: int
    shape: tuple[int, ...]


class Tape:
    """Topologically ordered record of the primitive applications behind a tensor."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes
        self.entries = [
            TapeEntry(i, n.op, tuple(p.id for p in n._parents), n.id, n.shape)
            for i, n in enumerate(nodes)
        ]

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.id in seen:
                continue
            seen.add(node.id)
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and p.id not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.entries)

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf and n.requires_grad]

    def dump(self) -> str:
        lines = []
        for e in self.entries:
            args = ", ".join(f"#{i}" for i in e.input_ids)
            lines.append(f"{e.index:5d}: {e.op}({args}) -> #{e.output_id} {list(e.shape)}")
        return "\n".join(lines)


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Reverse-accumulate d(loss)/d(leaf) for every reachable leaf needing a gradient.

    Leaves reachable only through a stop-gradient barrier get an explicit zero.
    Each leaf's ``.grad`` is overwritten with its gradient.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss does not depend on any tensor requiring grad")
    tape = Tape.record(loss)
    for entry, node in zip(tape.entries, tape.nodes):
        if node.is_leaf and not np.all(np.isfinite(node.data)):
            raise NonFiniteError(f"backward: non-finite forward value at tape entry {entry}")

    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.get(node.id)
        if g is None or node._backward is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.shape:
                raise ShapeError(
                    f"{node.op}: backward produced gradient of shape {pg.shape} for input {p.shape}"
                )
            if p.id in grads:
                grads[p.id] = grads[p.id] + pg
            else:
                grads[p.id] = pg

    out: dict[int, np.ndarray] = {}
    for leaf in tape.leaves():
        g = grads.get(leaf.id)
        if g is None:
            g = np.zeros_like(leaf.data)
        leaf.grad = g
        out[leaf.id] = g
    return out
