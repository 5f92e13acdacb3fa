"""Dense float64 tensors with a recorded reverse-mode graph."""

from __future__ import annotations

import contextlib
from typing import Callable, Mapping, Sequence

import numpy as np

from ..errors import ContractError, NumericError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording graph nodes (inference / teacher passes)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A node in the computation graph.

    Leaves are created directly; ``requires_grad=False`` marks a frozen leaf
    (or a constant), which never receives gradient. Non-leaf nodes keep their
    parents and a closure mapping the output gradient to parent gradients.
    """

    __slots__ = ("data", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Wrap a primitive's output; record it only when some parent is trainable.

    ``backward(g)`` must return one gradient (or None) per parent.
    """
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` for every trainable named leaf it reaches.

    Frozen leaves (``requires_grad=False``) and unreachable parameters are
    absent from the result. Accumulation order is fixed by the graph, so
    repeated calls on identical inputs are bit-identical.
    """
    if not isinstance(loss, Tensor):
        raise ContractError(f"backward: loss must be a graph Tensor, got {type(loss).__name__}")
    if loss.data.shape != ():
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not np.isfinite(loss.data):
        raise NumericError(f"backward: non-finite loss {float(loss.data)}")
    if not loss.requires_grad:
        return {}

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    for node in reversed(_topological_order(loss)):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        if node is not loss:
            del grads[id(node)]

    out = {}
    for name, p in params.items():
        if p.requires_grad and p.is_leaf and id(p) in grads:
            out[name] = np.asarray(grads[id(p)], dtype=np.float64).reshape(p.shape)
    return out


def check_finite(t: Tensor | np.ndarray, where: str) -> None:
    data = t.data if isinstance(t, Tensor) else t
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{where}: non-finite values detected")
