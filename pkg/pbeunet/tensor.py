"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable value in the engine is a `Tensor`: a rank 1-4 numpy
buffer (interpreted as N, C, H, W at rank 4) plus optional gradient state.
Operations executed while gradients are enabled record a `Node` on the
output tensor; `backward(root)` orders the reachable nodes into a `Tape`
and accumulates gradients in reverse.
"""
from __future__ import annotations

from contextlib import contextmanager
from enum import Enum
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from pbeunet.errors import ShapeError, TapeError

AXIS_NAMES = ("N", "C", "H", "W")


class Precision(str, Enum):
    """Numeric mode used for newly created tensors."""
    F32_TRAIN = "f32-train"
    F64_CHECK = "f64-check"


_DTYPES = {Precision.F32_TRAIN: np.float32, Precision.F64_CHECK: np.float64}
_state = {"precision": Precision.F32_TRAIN, "grad_enabled": True}
_flop_counters: List["FlopCounter"] = []


def get_precision() -> Precision:
    return _state["precision"]


def default_dtype() -> type:
    return _DTYPES[_state["precision"]]


@contextmanager
def precision(mode: Union[Precision, str]) -> Iterator[Precision]:
    """Switch the dtype of tensors created inside the block."""
    mode = Precision(mode)
    previous = _state["precision"]
    _state["precision"] = mode
    try:
        yield mode
    finally:
        _state["precision"] = previous


@contextmanager
def no_grad() -> Iterator[None]:
    """Run operations without recording them on the tape."""
    previous = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = previous


def is_grad_enabled() -> bool:
    return _state["grad_enabled"]


class FlopCounter:
    """Accumulates the FLOPs reported by operations while active."""

    def __init__(self):
        self.flops = 0
        self.by_op: Dict[str, int] = {}

    def __enter__(self) -> "FlopCounter":
        _flop_counters.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _flop_counters.remove(self)


def record_flops(op: str, count: int) -> None:
    for counter in _flop_counters:
        counter.flops += int(count)
        counter.by_op[op] = counter.by_op.get(op, 0) + int(count)


def axis_name(axis: int, rank: int) -> str:
    return AXIS_NAMES[axis] if rank == 4 else f"axis{axis}"


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Node:
    """Operation record: kind, inputs and the rule mapping output grad to input grads."""
    __slots__ = ("op", "inputs", "output", "backward_fn", "consumed")

    def __init__(self, op: str, inputs: Tuple["Tensor", ...], output: "Tensor", backward_fn: BackwardFn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.consumed = False

    def release(self) -> None:
        # Saved forward values live in the closure; drop them with the links.
        self.consumed = True
        self.inputs = ()
        self.output = None
        self.backward_fn = None


class Tape:
    """Operation records reachable from one root, inputs before consumers."""

    def __init__(self, nodes: List[Node]):
        self.nodes = nodes

    def __len__(self) -> int:
        return len(self.nodes)

    @classmethod
    def from_root(cls, root: "Tensor") -> "Tape":
        order: List[Node] = []
        seen = set()
        stack: List[Tuple[Node, bool]] = [(root.node, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            if node.consumed:
                raise TapeError("backward called twice without a new forward pass")
            seen.add(id(node))
            stack.append((node, True))
            for tensor in node.inputs:
                if tensor.node is not None and id(tensor.node) not in seen:
                    stack.append((tensor.node, False))
        return cls(order)


Operand = Union["Tensor", int, float]


class Tensor:
    """Rank 1-4 dense array with optional gradient state."""
    __slots__ = ("data", "requires_grad", "grad", "node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        array = np.array(data, dtype=default_dtype())
        if array.ndim == 0:
            array = array.reshape(1)
        if not 1 <= array.ndim <= 4:
            raise ShapeError("tensor", "rank", "1..4", array.ndim)
        if min(array.shape) < 1:
            raise ShapeError("tensor", "extent", "positive", array.shape)
        self.data = np.ascontiguousarray(array)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray, op: str, inputs: Sequence["Tensor"], backward_fn: BackwardFn) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.ascontiguousarray(data)
        out.grad = None
        out.name = None
        track = _state["grad_enabled"] and any(t.requires_grad for t in inputs)
        out.requires_grad = track
        out.node = Node(op, tuple(inputs), out, backward_fn) if track else None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError("item", "size", 1, self.size)
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out.node = None
        out.name = self.name
        return out

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}{label})"

    def __add__(self, other: Operand) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other: Operand) -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other: Operand) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Operand) -> "Tensor":
        return sub(other, self)

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __truediv__(self, other: Operand) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: Operand) -> "Tensor":
        return div(other, self)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def mean(self) -> "Tensor":
        return tensor_mean(self)

    def log(self) -> "Tensor":
        return log(self)

    def relu(self) -> "Tensor":
        return relu(self)

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)

    def reshape(self, *shape: int) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def tensor(data, requires_grad: bool = False, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(shape: Sequence[int], requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(tuple(shape)), requires_grad=requires_grad)


def ones(shape: Sequence[int], requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(tuple(shape)), requires_grad=requires_grad)


def check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape:
        return
    if a.ndim != b.ndim:
        raise ShapeError(op, "rank", a.ndim, b.ndim)
    for axis, (ea, eb) in enumerate(zip(a.shape, b.shape)):
        if ea != eb:
            raise ShapeError(op, axis_name(axis, a.ndim), ea, eb)


def _scalar(value) -> float:
    if isinstance(value, Tensor):
        raise TypeError("expected a Python scalar")
    return float(value)


def add(a: Operand, b: Operand) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        c = _scalar(b)
        return Tensor._wrap(a.data + c, "add", (a,), lambda g: (g,))
    check_same_shape("add", a, b)
    record_flops("add", a.size)
    return Tensor._wrap(a.data + b.data, "add", (a, b), lambda g: (g, g))


def mul(a: Operand, b: Operand) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        c = _scalar(b)
        return Tensor._wrap(a.data * c, "mul", (a,), lambda g: (g * c,))
    check_same_shape("mul", a, b)
    record_flops("mul", a.size)
    a_data, b_data = a.data, b.data
    return Tensor._wrap(a_data * b_data, "mul", (a, b), lambda g: (g * b_data, g * a_data))


def sub(a: Operand, b: Operand) -> Tensor:
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        check_same_shape("sub", a, b)
        return Tensor._wrap(a.data - b.data, "sub", (a, b), lambda g: (g, -g))
    if isinstance(a, Tensor):
        c = _scalar(b)
        return Tensor._wrap(a.data - c, "sub", (a,), lambda g: (g,))
    c = _scalar(a)
    return Tensor._wrap(c - b.data, "sub", (b,), lambda g: (-g,))


def div(a: Operand, b: Operand) -> Tensor:
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        check_same_shape("div", a, b)
        a_data, b_data = a.data, b.data
        return Tensor._wrap(
            a_data / b_data, "div", (a, b),
            lambda g: (g / b_data, -g * a_data / (b_data * b_data)),
        )
    if isinstance(a, Tensor):
        return mul(a, 1.0 / _scalar(b))
    c = _scalar(a)
    b_data = b.data
    return Tensor._wrap(c / b_data, "div", (b,), lambda g: (-g * c / (b_data * b_data),))


def elementwise_binary(a: Operand, b: Operand, kind: str) -> Tensor:
    """Elementwise add or mul; shapes must match unless one side is a scalar."""
    if kind == "add":
        return add(a, b)
    if kind == "mul":
        return mul(a, b)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def relu(x: Tensor) -> Tensor:
    record_flops("relu", x.size)
    positive = x.data > 0
    return Tensor._wrap(np.where(positive, x.data, 0).astype(x.dtype), "relu", (x,), lambda g: (g * positive,))


def sigmoid(x: Tensor) -> Tensor:
    record_flops("sigmoid", x.size)
    s = expit(x.data).astype(x.dtype)
    return Tensor._wrap(s, "sigmoid", (x,), lambda g: (g * s * (1 - s),))


def pointwise_activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def log(x: Tensor) -> Tensor:
    x_data = x.data
    return Tensor._wrap(np.log(x_data), "log", (x,), lambda g: (g / x_data,))


def clip(x: Tensor, low: float, high: float) -> Tensor:
    inside = (x.data >= low) & (x.data <= high)
    return Tensor._wrap(np.clip(x.data, low, high), "clip", (x,), lambda g: (g * inside,))


def tensor_sum(x: Tensor) -> Tensor:
    shape = x.shape
    return Tensor._wrap(x.data.sum().reshape(1), "sum", (x,), lambda g: (np.full(shape, g[0], dtype=g.dtype),))


def tensor_mean(x: Tensor) -> Tensor:
    return mul(tensor_sum(x), 1.0 / x.size)


def sum_per_sample(x: Tensor) -> Tensor:
    """Reduce every axis but the first: (N, ...) -> (N,)."""
    shape = x.shape
    n = shape[0]

    def backward_fn(g):
        return (np.broadcast_to(g.reshape((n,) + (1,) * (len(shape) - 1)), shape).copy(),)

    return Tensor._wrap(x.data.reshape(n, -1).sum(axis=1), "sum_per_sample", (x,), backward_fn)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    source = x.shape
    return Tensor._wrap(x.data.reshape(shape), "reshape", (x,), lambda g: (g.reshape(source),))


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into every reachable leaf's `grad`."""
    if root.size != 1:
        raise TapeError(f"backward root must be a scalar, got shape {root.shape}")
    if root.node is None:
        if not root.requires_grad:
            raise TapeError("backward root is not on the tape (requires_grad=False)")
        root.grad = np.ones_like(root.data) if root.grad is None else root.grad + 1
        return
    if root.node.consumed:
        raise TapeError("backward called twice without a new forward pass")

    tape = Tape.from_root(root)
    grads: Dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is not None:
            for source, source_grad in zip(node.inputs, node.backward_fn(g)):
                if source_grad is None or not source.requires_grad:
                    continue
                if source.node is None:
                    if source.grad is None:
                        source.grad = np.array(source_grad, dtype=source.dtype)
                    else:
                        source.grad += source_grad
                else:
                    key = id(source)
                    previous = grads.get(key)
                    grads[key] = source_grad if previous is None else previous + source_grad
        node.release()
