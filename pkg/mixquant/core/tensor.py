"""
Dense tensors and a reverse-mode gradient tape
"""

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ContractError, DegenerateInputError, DimensionError

DEFAULT_DTYPE = np.float32

Axis = Union[int, Tuple[int, ...], None]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """Immutable dense array, optionally recorded on a Tape

    Floating inputs keep their precision (float64 stays float64), integer
    ndarrays stay integer (quantized tensors), everything else becomes
    DEFAULT_DTYPE.
    """

    __slots__ = ("_data", "node_id", "tape")
    __array_priority__ = 100

    def __init__(self, data, dtype=None, node_id: Optional[int] = None,
                 tape: Optional["Tape"] = None, copy: bool = True):
        if isinstance(data, Tensor):
            data = data._data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype.kind in "fiu":
                dtype = data.dtype
            elif isinstance(data, np.generic) and data.dtype.kind == "f":
                dtype = data.dtype
            else:
                dtype = DEFAULT_DTYPE
        arr = np.array(data, dtype=dtype, copy=True) if copy else np.asarray(data, dtype=dtype)
        arr.setflags(write=False)
        self._data = arr
        self.node_id = node_id
        self.tape = tape

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> Tuple[int, ...]:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    @property
    def dtype(self) -> np.dtype:
        return self._data.dtype

    @property
    def tracked(self) -> bool:
        return self.node_id is not None

    def numpy(self) -> np.ndarray:
        return self._data.copy()

    def item(self) -> float:
        if self._data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return self._data.reshape(()).item()

    def __len__(self) -> int:
        return self._data.shape[0]

    def __repr__(self) -> str:
        node = f", node={self.node_id}" if self.node_id is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{node})"

    # Arithmetic
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis: Axis = None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis: Axis = None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)


@dataclass
class TapeEntry:
    """One recorded operation"""
    op: str
    inputs: Tuple[Optional[int], ...]
    output: int
    backward: BackwardFn


class Tape:
    """Ordered record of operations for one forward pass

    Entries are appended as operations execute, so every entry's inputs
    precede it. A tape has a single writer.
    """

    def __init__(self):
        self.entries: List[TapeEntry] = []
        self.leaves: List[int] = []
        self._shapes: Dict[int, Tuple[int, ...]] = {}
        self._dtypes: Dict[int, np.dtype] = {}
        self._next_id = 0

    def __len__(self) -> int:
        return len(self.entries)

    def _new_node(self, data: np.ndarray) -> int:
        node_id = self._next_id
        self._next_id += 1
        self._shapes[node_id] = data.shape
        self._dtypes[node_id] = data.dtype
        return node_id

    @property
    def node_count(self) -> int:
        return self._next_id

    def watch(self, value, dtype=None) -> Tensor:
        """Register a leaf tensor whose gradient is wanted"""
        leaf = Tensor(value, dtype=dtype)
        if leaf.dtype.kind != "f":
            raise ContractError(f"only floating tensors can be watched, got {leaf.dtype}")
        node_id = self._new_node(leaf.data)
        leaf.node_id = node_id
        leaf.tape = self
        self.leaves.append(node_id)
        return leaf

    def record(self, op: str, inputs: Sequence[Tensor], out: np.ndarray,
               backward: BackwardFn) -> Tensor:
        result = Tensor(out, copy=False)
        node_id = self._new_node(result.data)
        result.node_id = node_id
        result.tape = self
        input_ids = tuple(t.node_id if t.tape is self else None for t in inputs)
        self.entries.append(TapeEntry(op=op, inputs=input_ids, output=node_id, backward=backward))
        return result

    def shape_of(self, node_id: int) -> Tuple[int, ...]:
        return self._shapes[node_id]

    def dtype_of(self, node_id: int) -> np.dtype:
        return self._dtypes[node_id]


def apply_op(op: str, inputs: Sequence[Tensor], out: np.ndarray, backward: BackwardFn) -> Tensor:
    """Wrap an op result, recording it when any input lives on a tape"""
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ContractError(f"{op}: operands are recorded on different tapes")
            tape = t.tape
    if tape is None:
        return Tensor(out, copy=False)
    return tape.record(op, inputs, out, backward)


def backward(tape: Tape, loss: Tensor) -> Dict[int, np.ndarray]:
    """Reverse-mode accumulation; returns a gradient for every node on the tape

    Nodes the loss does not depend on get zeros.
    """
    if loss.size != 1:
        raise ContractError(f"loss must be a scalar, got shape {loss.shape}")
    grads: Dict[int, np.ndarray] = {}
    if loss.node_id is not None:
        if loss.tape is not tape:
            raise ContractError("loss was not recorded on this tape")
        grads[loss.node_id] = np.ones(loss.shape, dtype=loss.dtype)
        for entry in reversed(tape.entries):
            grad_out = grads.get(entry.output)
            if grad_out is None:
                continue
            for node_id, grad_in in zip(entry.inputs, entry.backward(grad_out)):
                if node_id is None or grad_in is None:
                    continue
                grad_in = np.array(grad_in, dtype=tape.dtype_of(node_id))
                previous = grads.get(node_id)
                grads[node_id] = grad_in if previous is None else previous + grad_in
    return {
        node_id: grads[node_id] if node_id in grads
        else np.zeros(tape.shape_of(node_id), dtype=tape.dtype_of(node_id))
        for node_id in range(tape.node_count)
    }


def as_tensor(value, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    if like is not None and not isinstance(value, np.ndarray):
        return Tensor(value, dtype=like.dtype)
    return Tensor(value)


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`"""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _normalize_axes(axis: Axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    normalized = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise ContractError(f"axis {a} out of range for rank {ndim}")
        normalized.append(a % ndim)
    return tuple(sorted(set(normalized)))


# Elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return apply_op("add", (a, b), a.data + b.data,
                    lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return apply_op("sub", (a, b), a.data - b.data,
                    lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return apply_op("mul", (a, b), a.data * b.data,
                    lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)

    def _backward(g):
        return (unbroadcast(g / b.data, a.shape),
                unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return apply_op("div", (a, b), a.data / b.data, _backward)


def neg(a: Tensor) -> Tensor:
    return apply_op("neg", (a,), -a.data, lambda g: (-g,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return apply_op("sqrt", (a,), out, lambda g: (g * 0.5 / out,))


def _pair(a, b) -> Tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


# Linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes of `a` are batch axes"""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul needs operands of rank >= 2", a.shape, b.shape)
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError("matmul inner dimensions differ", a.shape, b.shape)

    def _backward(g):
        grad_a = np.matmul(g, np.swapaxes(b.data, -1, -2))
        grad_b = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return unbroadcast(grad_a, a.shape), unbroadcast(grad_b, b.shape)

    return apply_op("matmul", (a, b), np.matmul(a.data, b.data), _backward)


def einsum(subscripts: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum with explicit output, e.g. 'bci,coi->bco'"""
    inputs, output = subscripts.replace(" ", "").split("->")
    spec_a, spec_b = inputs.split(",")
    for spec in (spec_a, spec_b, output):
        if len(set(spec)) != len(spec):
            raise ContractError(f"einsum: repeated index in '{spec}' is not supported")
    for spec, other in ((spec_a, spec_b), (spec_b, spec_a)):
        missing = set(spec) - set(output) - set(other)
        if missing:
            raise ContractError(f"einsum: index {sorted(missing)} of '{spec}' is summed alone")
    if a.ndim != len(spec_a) or b.ndim != len(spec_b):
        raise DimensionError(f"einsum '{subscripts}' rank mismatch", a.shape, b.shape)
    out = np.einsum(subscripts, a.data, b.data)

    def _backward(g):
        return (np.einsum(f"{output},{spec_b}->{spec_a}", g, b.data),
                np.einsum(f"{output},{spec_a}->{spec_b}", g, a.data))

    return apply_op("einsum", (a, b), out, _backward)


# Shape manipulation

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = a.data.reshape(tuple(shape))
    return apply_op("reshape", (a,), out, lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return apply_op("transpose", (a,), a.data.transpose(axes), lambda g: (g.transpose(inverse),))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ContractError("stack needs at least one tensor")
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError("stack operands differ in shape", *sorted(shapes))
    out = np.stack([t.data for t in tensors], axis=axis)

    def _backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return apply_op("stack", tuple(tensors), out, _backward)


def repeat(a: Tensor, repeats: int, axis: int) -> Tensor:
    """np.repeat: each slice along `axis` repeated `repeats` times consecutively"""
    axis = axis % a.ndim
    out = np.repeat(a.data, repeats, axis=axis)

    def _backward(g):
        split = g.shape[:axis] + (a.shape[axis], repeats) + g.shape[axis + 1:]
        return (g.reshape(split).sum(axis=axis + 1),)

    return apply_op("repeat", (a,), out, _backward)


# Reductions

def tensor_sum(a: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def _backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return apply_op("sum", (a,), np.asarray(out), _backward)


def mean(a: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    if count == 0:
        raise DegenerateInputError(f"mean over empty extent of shape {a.shape}")
    return tensor_sum(a, axes, keepdims) * (1.0 / count)


def moments(x: Tensor, axis: Axis, keepdims: bool = False) -> Tuple[Tensor, Tensor]:
    """Mean and population variance (divide by n) along `axis`"""
    axes = _normalize_axes(axis, x.ndim)
    if any(x.shape[i] == 0 for i in axes):
        raise DegenerateInputError(f"moments over empty extent of shape {x.shape}")
    mu = mean(x, axes, keepdims=True)
    centered = x - mu
    var = mean(centered * centered, axes, keepdims=True)
    if not keepdims:
        kept = tuple(n for i, n in enumerate(x.shape) if i not in axes)
        mu, var = reshape(mu, kept), reshape(var, kept)
    return mu, var
