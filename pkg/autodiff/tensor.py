"""
Tensor

Minimal reverse-mode differentiable tensor backed by numpy arrays.
Every operation records a closure that maps the output gradient to the
gradients of its parents; `backward` walks the graph in reverse
topological order and accumulates into leaf tensors.
"""

import logging
import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Optional, Sequence, Tuple, Union

import numpy as np

from models.errors import ShapeError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence[float]]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_grad_mode = threading.local()


def is_grad_enabled() -> bool:
    """Whether operations currently record a graph (per thread)."""
    return getattr(_grad_mode, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording for the enclosed block on this thread."""
    previous = is_grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum out broadcast dimensions so `grad` matches `shape`."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """
    N-dimensional floating-point array participating in a differentiation graph.

    Attributes:
        data: Underlying numpy array (row-major)
        requires_grad: Whether gradients are tracked for this tensor
        grad: Accumulated gradient for leaf tensors, same shape as data
    """

    def __init__(self, data: ArrayLike, requires_grad: bool = False,
                 name: Optional[str] = None,
                 _parents: Tuple["Tensor", ...] = (),
                 _backward: Optional[BackwardFn] = None):
        array = np.asarray(data)
        if not np.issubdtype(array.dtype, np.floating):
            array = array.astype(np.float64)
        self.data: np.ndarray = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents = _parents
        self._backward = _backward

    # ------------------------------------------------------------------ graph

    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence["Tensor"],
              backward: BackwardFn) -> "Tensor":
        """Wrap an op result, recording the graph only when needed."""
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            return cls(data, requires_grad=True, _parents=tuple(parents), _backward=backward)
        return cls(data)

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """
        Back-propagate from this scalar tensor.

        Gradients are summed over all paths and added to any existing
        `.grad` of leaf tensors, so repeated calls accumulate.

        Raises:
            ShapeError: If called on a non-scalar tensor without a seed gradient
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() requires a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            logger.debug("backward() called on a tensor that does not require grad")
            return

        order = self._topological_order()
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}

        for node in reversed(order):
            node_grad = grads.pop(id(node), None)
            if node_grad is None:
                continue
            if node.is_leaf:
                node.grad = node_grad.copy() if node.grad is None else node.grad + node_grad
                continue
            parent_grads = node._backward(node_grad)
            for parent, parent_grad in zip(node._parents, parent_grads):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + parent_grad
                else:
                    grads[key] = parent_grad

    def _topological_order(self) -> list:
        order, visited = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return order

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """Same data, cut from the graph."""
        return Tensor(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    # ------------------------------------------------------------- properties

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def _lift(self, other: Union["Tensor", ArrayLike]) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    # ------------------------------------------------------------- arithmetic

    def __add__(self, other):
        other = self._lift(other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._make(self.data + other.data, (self, other),
                            lambda g: (unbroadcast(g, a_shape), unbroadcast(g, b_shape)))

    __radd__ = __add__

    def __sub__(self, other):
        other = self._lift(other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._make(self.data - other.data, (self, other),
                            lambda g: (unbroadcast(g, a_shape), unbroadcast(-g, b_shape)))

    def __rsub__(self, other):
        return self._lift(other) - self

    def __mul__(self, other):
        other = self._lift(other)
        a, b = self.data, other.data
        return Tensor._make(a * b, (self, other),
                            lambda g: (unbroadcast(g * b, a.shape), unbroadcast(g * a, b.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._lift(other)
        a, b = self.data, other.data
        return Tensor._make(a / b, (self, other),
                            lambda g: (unbroadcast(g / b, a.shape),
                                       unbroadcast(-g * a / (b * b), b.shape)))

    def __rtruediv__(self, other):
        return self._lift(other) / self

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, exponent: float):
        if isinstance(exponent, Tensor):
            raise TypeError("only scalar exponents are supported")
        a = self.data
        return Tensor._make(a ** exponent, (self,),
                            lambda g: (g * exponent * a ** (exponent - 1),))

    def __matmul__(self, other):
        other = self._lift(other)
        a, b = self.data, other.data
        if a.ndim != 2 or b.ndim != 2:
            raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
        return Tensor._make(a @ b, (self, other), lambda g: (g @ b.T, a.T @ g))

    # ------------------------------------------------------------ elementwise

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,))

    def log(self) -> "Tensor":
        a = self.data
        return Tensor._make(np.log(a), (self,), lambda g: (g / a,))

    def sqrt(self) -> "Tensor":
        out = np.sqrt(self.data)
        return Tensor._make(out, (self,), lambda g: (g * 0.5 / out,))

    def abs(self) -> "Tensor":
        sign = np.sign(self.data)
        return Tensor._make(np.abs(self.data), (self,), lambda g: (g * sign,))

    def astype(self, dtype) -> "Tensor":
        source = self.data.dtype
        return Tensor._make(self.data.astype(dtype), (self,), lambda g: (g.astype(source),))

    # ------------------------------------------------------------- reductions

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._make(np.asarray(out), (self,), backward)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # ---------------------------------------------------------------- shaping

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        source = self.shape
        return Tensor._make(self.data.reshape(shape), (self,), lambda g: (g.reshape(source),))

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        return Tensor._make(self.data.transpose(axes), (self,), lambda g: (g.transpose(inverse),))

    def __getitem__(self, index) -> "Tensor":
        shape, dtype = self.shape, self.dtype

        def backward(g):
            full = np.zeros(shape, dtype=dtype)
            np.add.at(full, index, g)
            return (full,)

        return Tensor._make(np.asarray(self.data[index]), (self,), backward)


def tensor(data: ArrayLike, requires_grad: bool = False, dtype=None) -> Tensor:
    """Convenience constructor with an optional dtype cast."""
    array = np.array(data, dtype=dtype) if dtype is not None else np.array(data)
    return Tensor(array, requires_grad=requires_grad)
