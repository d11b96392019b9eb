"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations are recorded only while a :class:`Graph` is active (``with Graph() as g``)
and at least one input requires a gradient. Outside a graph every op is a plain
numpy evaluation, which is what inference and evaluation passes use.
"""
from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class ConfigError(ValueError):
    """Invalid user-supplied configuration."""


class ContractError(RuntimeError):
    pass


_local = threading.local()


def _active_graph() -> "Graph | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_graph", "_node")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._graph: Graph | None = None
        self._node: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    # operator sugar; implementations live in ops
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

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def sum(self):
        from . import ops
        return ops.sum(self)

    def mean(self):
        from . import ops
        return ops.mean(self)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Node:
    __slots__ = ("kind", "parents", "backward_fn")

    def __init__(self, kind: str, parents: tuple[Tensor, ...], backward_fn: Callable):
        self.kind = kind
        self.parents = parents
        self.backward_fn = backward_fn


class Graph:
    """Append-only tape of recorded ops.

    Node ``i`` only ever refers to tensors produced by nodes ``< i`` or to leaves, so
    a single reverse sweep visits every node once. A graph can be swept once; a
    second ``backward`` raises instead of silently stacking gradients.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.consumed = False

    def __enter__(self) -> "Graph":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, kind: str, out: Tensor, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
        if self.consumed:
            raise ContractError("cannot record onto a graph that has already been differentiated")
        out.requires_grad = True
        out._graph = self
        out._node = len(self.nodes)
        self.nodes.append(Node(kind, tuple(parents), backward_fn))
        return out

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise ContractError("graph already differentiated; build a new graph per step")
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._graph is not self:
            raise ContractError("loss was not recorded on this graph")
        self.consumed = True
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[loss._node] = np.ones_like(loss.data)
        for i in range(loss._node, -1, -1):
            g = grads[i]
            if g is None:
                continue
            node = self.nodes[i]
            pgrads = node.backward_fn(g)
            for p, pg in zip(node.parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                if p._graph is self:
                    j = p._node
                    grads[j] = pg if grads[j] is None else grads[j] + pg
                elif p._graph is None:
                    p.grad = pg.copy() if p.grad is None else p.grad + pg
        # drop references to saved activations
        self.nodes = []


def backward(graph: Graph, loss: Tensor) -> None:
    graph.backward(loss)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)
