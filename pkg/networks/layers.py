"""
Parameterised building blocks.

`Module` collects parameters by walking attributes in definition order;
the same submodule reachable twice (Siamese sharing) is counted once.
"""

import logging
from contextlib import contextmanager
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from autodiff import functional as F
from autodiff.tensor import Tensor
from models.errors import ShapeError

logger = logging.getLogger(__name__)


def parameter(array: np.ndarray, name: Optional[str] = None) -> Tensor:
    return Tensor(array, requires_grad=True, name=name)


class Module:
    """Base class for anything that owns trainable tensors."""

    _frozen = False

    def named_parameters(self, prefix: str = "") -> List[Tuple[str, Tensor]]:
        seen = set()
        named = []
        for name, tensor in self._walk(prefix):
            if id(tensor) in seen:
                continue
            seen.add(id(tensor))
            named.append((name, tensor))
        return named

    def _walk(self, prefix: str) -> Iterator[Tuple[str, Tensor]]:
        for attr, value in vars(self).items():
            if attr.startswith('_'):
                continue
            path = f"{prefix}{attr}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield path, value
            elif isinstance(value, Module):
                yield from value._walk(f"{path}.")
            elif isinstance(value, (list, tuple)):
                for index, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item._walk(f"{path}.{index}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for attr, value in vars(self).items():
            if attr.startswith('_'):
                continue
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def parameters(self) -> List[Tensor]:
        return [t for _, t in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.parameters()))

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        for name, t in self.named_parameters():
            if name not in state:
                raise ShapeError(f"missing parameter {name} in state")
            array = np.asarray(state[name])
            if array.shape != t.shape:
                raise ShapeError(f"parameter {name}: expected {t.shape}, got {array.shape}")
            t.data = array.astype(t.dtype, copy=True)

    @contextmanager
    def frozen(self) -> Iterator[None]:
        """Use parameters as constants: no gradient reaches them inside the block."""
        modules = list(self.modules())
        previous = [m._frozen for m in modules]
        for m in modules:
            m._frozen = True
        try:
            yield
        finally:
            for m, flag in zip(modules, previous):
                m._frozen = flag

    def _p(self, t: Optional[Tensor]) -> Optional[Tensor]:
        if t is None:
            return None
        return t.detach() if self._frozen else t


class Conv1d(Module):
    """1-D convolution; `padding` is symmetric zero padding."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 rng: np.random.Generator, dilation: int = 1, padding: int = 0,
                 dtype=np.float32):
        bound = 1.0 / np.sqrt(in_channels * kernel_size)
        self.weight = parameter(rng.uniform(-bound, bound, (out_channels, in_channels, kernel_size)).astype(dtype))
        self.bias = parameter(rng.uniform(-bound, bound, out_channels).astype(dtype))
        self.dilation = dilation
        self.padding = padding

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv1d(x, self._p(self.weight), self._p(self.bias),
                        dilation=self.dilation, padding=self.padding)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 bias: bool = True, weight_scale: Optional[float] = None,
                 bias_value: Optional[float] = None, dtype=np.float32):
        bound = weight_scale if weight_scale is not None else 1.0 / np.sqrt(in_features)
        self.weight = parameter(rng.uniform(-bound, bound, (out_features, in_features)).astype(dtype))
        self.bias = None
        if bias:
            if bias_value is not None:
                init = np.full(out_features, bias_value)
            else:
                init = rng.uniform(-bound, bound, out_features)
            self.bias = parameter(init.astype(dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return F.linear(x, self._p(self.weight), self._p(self.bias))
