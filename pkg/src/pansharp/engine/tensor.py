"""Dense 4-D tensors and the gradient tape that records operations on them.

A :class:`Tensor` is a thin wrapper around a 4-D numpy array laid out as
``(batch, channels, height, width)``. Tensors created through
:meth:`Tape.variable` are leaves of that tape; every op applied to a tracked
tensor appends a node to the same tape, so the node list is topologically
ordered by construction and :meth:`Tape.backward` is a single reverse sweep.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import ContractViolation

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class _Node:
    __slots__ = ("op", "inputs", "backward", "leaf")

    def __init__(self, op, inputs, backward, leaf=None):
        self.op = op
        self.inputs = inputs
        self.backward = backward
        self.leaf = leaf


class Tensor:
    """A 4-D array that may be attached to a :class:`Tape`."""

    __slots__ = ("values", "tape", "node", "generation", "grad")

    def __init__(self, values, tape: "Tape | None" = None, node: int | None = None):
        values = np.asarray(values)
        if values.ndim != 4:
            raise ContractViolation(f"tensors are 4-D (batch, channels, height, width); got shape {values.shape}")
        if min(values.shape) < 1:
            raise ContractViolation(f"every tensor dimension must be >= 1; got {values.shape}")
        if not np.issubdtype(values.dtype, np.floating):
            values = values.astype(np.float64)
        self.values = values
        self.tape = tape
        self.node = node
        self.generation = tape.generation if tape is not None else -1
        self.grad = None

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractViolation(f"item() needs a single-element tensor, got {self.shape}")
        return float(self.values.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.values

    def __repr__(self):
        state = "tracked" if self.tracked else "constant"
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, {state})"


class Tape:
    """Ordered record of tracked operations; consumed by :meth:`backward`."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.generation = 0

    def __len__(self):
        return len(self.nodes)

    def variable(self, values) -> Tensor:
        """Register ``values`` as a differentiable leaf."""
        t = Tensor(np.array(values, copy=True), tape=self, node=len(self.nodes))
        self.nodes.append(_Node("leaf", (), None, leaf=t))
        return t

    def record(self, op: str, inputs: Sequence[Tensor], values: np.ndarray, backward: BackwardFn) -> Tensor:
        out = Tensor(values, tape=self, node=len(self.nodes))
        self.nodes.append(_Node(op, tuple(inputs), backward))
        return out

    def owns(self, t: Tensor) -> bool:
        if t.tape is not self:
            return False
        if t.generation != self.generation:
            raise ContractViolation("tensor belongs to a tape that was already consumed by backward()")
        return True

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Propagate d(loss)/d(leaf) to every leaf of the tape.

        Returns a map from leaf node id to gradient and also stores each
        gradient on the leaf's ``grad`` attribute. The tape is reset afterwards.
        """
        if loss.shape != (1, 1, 1, 1):
            raise ContractViolation(f"backward() needs a scalar loss of shape (1,1,1,1); got {loss.shape}")
        if not self.owns(loss):
            raise ContractViolation("loss is not attached to this tape")

        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[loss.node] = np.ones_like(loss.values)
        for idx in range(loss.node, -1, -1):
            g = grads[idx]
            node = self.nodes[idx]
            if g is None or node.leaf is not None:
                continue
            grads[idx] = None
            for inp, ig in zip(node.inputs, node.backward(g)):
                if ig is None or inp.tape is not self:
                    continue
                if grads[inp.node] is None:
                    grads[inp.node] = np.array(ig, dtype=inp.values.dtype, copy=True)
                else:
                    grads[inp.node] += ig

        result = {}
        for idx, node in enumerate(self.nodes):
            if node.leaf is None:
                continue
            g = grads[idx]
            if g is None:
                g = np.zeros_like(node.leaf.values)
            node.leaf.grad = g
            result[idx] = g
        self.nodes = []
        self.generation += 1
        return result


def common_tape(inputs: Sequence[Tensor]) -> "Tape | None":
    tape = None
    for t in inputs:
        if t.tape is None:
            continue
        t.tape.owns(t)
        if tape is None:
            tape = t.tape
        elif t.tape is not tape:
            raise ContractViolation("cannot combine tensors recorded on different tapes")
    return tape
