"""Tensor type and the dynamic tape used for reverse-mode differentiation.

Every differentiable op appends one node to the active :class:`Tape`.
:func:`backward` walks the nodes in reverse creation order, so the tape order
doubles as a topological order and no graph sort is needed.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """Dense numeric array with an optional gradient.

    Image-like tensors are laid out (batch, channel, height, width). Scalars
    (losses) and per-channel vectors (batchnorm affine parameters) use the
    same type with lower rank.
    """

    __slots__ = ("data", "grad", "requires_grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node: Node | None = None
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

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        """Same values, cut off from the tape."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


@dataclass
class Tape:
    nodes: list[Node] = field(default_factory=list)

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward: BackwardFn) -> None:
        node = Node(op, tuple(inputs), output, backward)
        output.node = node
        self.nodes.append(node)

    def clear(self) -> None:
        for node in self.nodes:
            node.output.node = None
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


_tape = Tape()
_grad_enabled = True


def get_tape() -> Tape:
    return _tape


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run ops without recording them."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def frozen(params: Iterable[Tensor]) -> Iterator[None]:
    """Temporarily stop gradients from accumulating into ``params``.

    Gradients still flow *through* ops that use them.
    """
    params = list(params)
    prev = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in zip(params, prev):
            p.requires_grad = flag


def make_result(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    """Wrap an op's output and record it when any input needs a gradient."""
    out = Tensor(data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _tape.record(op, inputs, out, backward)
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    Intermediate gradients are released as soon as their node is processed
    and the tape is cleared afterwards.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        raise ValueError("loss is not on the tape (computed under no_grad or detached?)")
    loss.grad = np.ones_like(loss.data)
    try:
        for node in reversed(_tape.nodes):
            out = node.output
            g = out.grad
            if g is None:
                continue
            out.grad = None
            grads = node.backward(g)
            for inp, gi in zip(node.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                if gi.shape != inp.shape:
                    raise AssertionError(f"{node.op}: grad shape {gi.shape} != input shape {inp.shape}")
                if inp.grad is None:
                    inp.grad = np.array(gi, dtype=inp.dtype, copy=True)
                else:
                    inp.grad += gi
    finally:
        _tape.clear()
