"""A small n-dimensional tensor with tape-based reverse-mode differentiation.

Operations only record themselves while a :class:`Tape` is active and at
least one operand requires a gradient, so inference outside a tape keeps
no graph and no saved intermediates.

    >>> x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = ops.tensor_sum(x)
    >>> tape.backward(loss)
    >>> x.grad
    array([1., 1., 1.], dtype=float32)
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import UsageError

DTYPE = np.float32

# innermost tape last
_ACTIVE_TAPES: list["Tape"] = []


class Tensor:
    """Array value plus an optional gradient slot.

    Values are stored as 32-bit floats unless another floating dtype is
    requested explicitly (the gradient checker promotes to 64-bit).
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_node")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.array(data, dtype=dtype or DTYPE, copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._node: Node | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.name = None
        t._node = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def retain_grad(self) -> "Tensor":
        """Ask the tape to store this intermediate's gradient in ``.grad``."""
        if self._node is not None:
            self._node.retained = self
        return self

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __getitem__(self, index) -> "Tensor":
        from . import ops

        return ops.index(self, index)

    def __add__(self, other: "Tensor") -> "Tensor":
        from . import ops

        return ops.add(self, other)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


class Node:
    """One recorded primitive: how to map an output gradient to input gradients.

    ``parents`` holds, per operand, the producing node for intermediates,
    the tensor itself for leaves that require a gradient, or ``None``.
    """

    __slots__ = ("backward_fn", "parents", "op", "retained")

    def __init__(self, backward_fn: Callable, parents: tuple, op: str):
        self.backward_fn = backward_fn
        self.parents = parents
        self.op = op
        self.retained: Tensor | None = None


class Tape:
    """Ordered record of executed primitives; nodes are appended in execution
    order, which is a valid topological order by construction."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        """Propagate d(loss)/d(.) to every leaf reachable from ``loss``.

        Leaf gradients accumulate into ``.grad``; callers zero them between
        steps. The tape is consumed: saved intermediates are released.
        """
        if loss.data.size != 1:
            raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
        seed = np.ones_like(loss.data)
        if loss._node is None:
            if loss.requires_grad:
                _accumulate_leaf(loss, seed)
            return
        grads: dict[int, np.ndarray] = {id(loss._node): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                node.backward_fn = None
                continue
            if node.retained is not None:
                node.retained.grad = g
            needs = tuple(p is not None for p in node.parents)
            input_grads = node.backward_fn(g, needs)
            node.backward_fn = None
            for parent, ig in zip(node.parents, input_grads):
                if parent is None or ig is None:
                    continue
                if isinstance(parent, Node):
                    key = id(parent)
                    prev = grads.get(key)
                    grads[key] = ig if prev is None else prev + ig
                else:
                    _accumulate_leaf(parent, ig)
        self.nodes.clear()


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None or t.grad.shape != t.data.shape or t.grad.dtype != t.data.dtype:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def backward(loss: Tensor, tape: Tape) -> None:
    """Functional alias for :meth:`Tape.backward`."""
    tape.backward(loss)


def active_tape() -> Tape | None:
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


def record(out: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap ``out`` and, if differentiation is live, append a node to the tape."""
    result = Tensor._wrap(out)
    tape = active_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return result
    parents = tuple(
        t._node if t._node is not None else (t if t.requires_grad else None) for t in inputs
    )
    node = Node(backward_fn, parents, op)
    tape.nodes.append(node)
    result._node = node
    result.requires_grad = True
    return result


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)
