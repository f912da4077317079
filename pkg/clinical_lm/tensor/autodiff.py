"""
Dense tensors with reverse-mode automatic differentiation.

A Tensor wraps a row-major numpy array. Operations executed while a Tape is
active (``with Tape() as tape:``) are recorded together with the inputs their
backward needs; ``tape.backward(loss)`` walks the record in exact reverse
order and accumulates gradients additively into leaf tensors that require
grad. The active tape is thread-local, so distinct tapes can run on distinct
worker threads without sharing state.
"""
import contextlib
import threading
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from clinical_lm.errors import ClinicalLMError, ShapeError

ArrayLike = Union["Tensor", np.ndarray, float, int]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_DEFAULT_DTYPE = np.float32
_local = threading.local()


def get_default_dtype():
    return getattr(_local, "dtype", _DEFAULT_DTYPE)


def set_default_dtype(dtype) -> None:
    """Set the float precision for new tensors on this thread."""
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ClinicalLMError(
            f"unsupported precision {dtype}; use float32 or float64",
            error_key="config",
        )
    _local.dtype = dtype.type


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    previous = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _local.dtype = previous


def _tape_stack() -> List["Tape"]:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = []
        _local.tapes = stack
    return stack


def current_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording on this thread (evaluation passes)."""
    stack = _tape_stack()
    saved = list(stack)
    stack.clear()
    try:
        yield
    finally:
        stack.extend(saved)


class Tensor:
    """Dense float array with an optional gradient."""

    __array_priority__ = 100

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: Optional[str] = None,
        dtype=None,
    ):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype.kind == "f":
                dtype = data.dtype
            else:
                dtype = get_default_dtype()
        self.data = np.ascontiguousarray(np.asarray(data, dtype=dtype))
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.is_leaf = True

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return (
            f"Tensor(shape={self.shape}, dtype={self.dtype}"
            f"{label}, requires_grad={self.requires_grad})"
        )

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)


class _Node:
    __slots__ = ("out", "inputs", "backward", "op")

    def __init__(self, out, inputs, backward, op):
        self.out = out
        self.inputs = inputs
        self.backward = backward
        self.op = op


class Tape:
    """
    Ordered record of differentiable operations.

    Use as a context manager to make it the active tape for this thread.
    ``backward`` may be called more than once; leaf gradients accumulate.
    """

    def __init__(self):
        self._nodes: List[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self._nodes)

    @property
    def ops(self) -> List[str]:
        return [node.op for node in self._nodes]

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward, op):
        self._nodes.append(_Node(out, tuple(inputs), backward, op))

    def reset(self) -> None:
        self._nodes.clear()

    def backward(self, loss: Tensor) -> None:
        """
        Reverse-mode accumulation from a scalar loss into every leaf that
        requires grad.
        """
        if loss.size != 1:
            raise ShapeError("backward requires a scalar loss", loss.shape)
        if loss.is_leaf or not loss.requires_grad:
            raise ClinicalLMError(
                "loss was not produced on this tape", error_key="autodiff"
            )
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self._nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            input_grads = node.backward(g)
            for tensor, gi in zip(node.inputs, input_grads):
                if gi is None or not tensor.requires_grad:
                    continue
                if gi.shape != tensor.shape:
                    gi = _unbroadcast(gi, tensor.shape)
                if tensor.is_leaf:
                    gi = gi.astype(tensor.dtype, copy=False)
                    if tensor.grad is None:
                        tensor.grad = gi.copy()
                    else:
                        tensor.grad = tensor.grad + gi
                else:
                    key = id(tensor)
                    if key in grads:
                        grads[key] = grads[key] + gi
                    else:
                        grads[key] = gi


def backward(loss: Tensor, tape: Optional[Tape] = None) -> None:
    """Run ``tape.backward(loss)``; defaults to the active tape."""
    tape = tape or current_tape()
    if tape is None:
        raise ClinicalLMError("no tape to run backward on", error_key="autodiff")
    tape.backward(loss)


def as_tensor(value: ArrayLike, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value), dtype=dtype)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(
        i for i, dim in enumerate(shape) if dim == 1 and grad.shape[i] != 1
    )
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _result(data: np.ndarray, inputs: Sequence[Tensor], backward, op: str):
    tape = current_tape()
    requires = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=requires, dtype=data.dtype)
    if requires:
        out.is_leaf = False
        tape.record(out, inputs, backward, op)
    return out


def _broadcast_check(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes do not broadcast", a.shape, b.shape)


def _pair(a: ArrayLike, b: ArrayLike) -> Tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check(a, b, "div")
    ad, bd = a.data, b.data

    def _backward(g):
        return g / bd, -g * ad / (bd * bd)

    return _result(ad / bd, (a, b), _backward, "div")


def _swap_last(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes (numpy broadcasting)."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul shape mismatch", a.shape, b.shape)
    ad, bd = a.data, b.data

    def _backward(g):
        return np.matmul(g, _swap_last(bd)), np.matmul(_swap_last(ad), g)

    return _result(np.matmul(ad, bd), (a, b), _backward, "matmul")


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(int(x) % a.ndim for x in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: invalid axes {axes}", a.shape)
    inverse = tuple(np.argsort(axes))
    return _result(
        np.transpose(a.data, axes),
        (a,),
        lambda g: (np.transpose(g, inverse),),
        "transpose",
    )


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape: incompatible size", a.shape, shape)
    original = a.shape
    return _result(out, (a,), lambda g: (g.reshape(original),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ShapeError("concat: no tensors")
    tensors = [as_tensor(t) for t in tensors]
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        same = t.ndim == ndim and all(
            t.shape[i] == tensors[0].shape[i] for i in range(ndim) if i != axis
        )
        if not same:
            raise ShapeError("concat shape mismatch", tensors[0].shape, t.shape)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def _backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _result(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        _backward,
        "concat",
    )


def slice_(a: Tensor, index) -> Tensor:
    """Basic or advanced indexing; gradients scatter-add back."""
    shape, dtype = a.shape, a.dtype

    def _backward(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, index, g)
        return (out,)

    return _result(np.array(a.data[index]), (a,), _backward, "slice")


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Rows of ``table`` [V, H] gathered by integer ``ids`` [...]."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError("embedding table must be 2-D", table.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ClinicalLMError(
            f"token id out of range [0, {table.shape[0]}): "
            f"min={int(ids.min())} max={int(ids.max())}",
            error_key="vocabulary",
        )
    shape, dtype = table.shape, table.dtype

    def _backward(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (out,)

    return _result(table.data[ids], (table,), _backward, "embedding_lookup")


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def _backward(g):
        if axis is not None and not keepdims:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            axes = tuple(x % len(shape) for x in axes)
            for ax in sorted(axes):
                g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(
        np.asarray(a.data.sum(axis=axis, keepdims=keepdims)),
        (a,),
        _backward,
        "sum",
    )


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[x] for x in axes]))
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / max(count, 1))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor, eps: float = 0.0) -> Tensor:
    clamped = np.maximum(a.data, eps) if eps > 0 else a.data
    mask = (a.data >= eps) if eps > 0 else None

    def _backward(g):
        grad = g / clamped
        if mask is not None:
            grad = np.where(mask, grad, 0.0).astype(a.dtype)
        return (grad,)

    return _result(np.log(clamped), (a,), _backward, "log")


def dropout(
    a: Tensor, rate: float, rng: Optional[np.random.Generator], training: bool
) -> Tensor:
    """Inverted dropout; identity when not training or rate is 0."""
    if not training or rate <= 0.0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= rate).astype(a.dtype) / (1.0 - rate)
    return _result(a.data * keep, (a,), lambda g: (g * keep,), "dropout")
