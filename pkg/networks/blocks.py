"""
Convolution blocks: atrous pyramid convolution (APC) and the wide kernel
bank it replaces.
"""

from typing import Sequence

import numpy as np

from autodiff import functional as F
from autodiff.tensor import Tensor
from models.network import BLOCK_APC, ModelConfig
from networks.layers import Conv1d, Module


class APCBlock(Module):
    """
    Parallel kernel-3 convolutions with different dilations, concatenated,
    projected back to `channels` by a 1x1 convolution and added to the input.
    Shape is preserved: [.., C, T] -> [.., C, T].
    """

    def __init__(self, channels: int, dilations: Sequence[int], rng: np.random.Generator,
                 kernel_size: int = 3, dtype=np.float32):
        self.channels = channels
        self.dilations = list(dilations)
        half = (kernel_size - 1) // 2
        self.branches = [Conv1d(channels, channels, kernel_size, rng, dilation=d,
                                padding=d * half, dtype=dtype)
                         for d in self.dilations]
        self.projection = Conv1d(len(self.dilations) * channels, channels, 1, rng, dtype=dtype)

    @property
    def receptive_field(self) -> int:
        return 1 + (self.branches[0].kernel_size - 1) * max(self.dilations)

    def __call__(self, x: Tensor) -> Tensor:
        pyramid = F.concat([branch(x) for branch in self.branches], axis=-2)
        return x + self.projection(pyramid)


class ConvBankBlock(Module):
    """Bank of kernels of increasing size (1..8 by default), same wiring as APC."""

    def __init__(self, channels: int, kernel_sizes: Sequence[int], rng: np.random.Generator,
                 dtype=np.float32):
        self.channels = channels
        self.kernel_sizes = list(kernel_sizes)
        self.branches = [Conv1d(channels, channels, k, rng, dtype=dtype) for k in self.kernel_sizes]
        self.projection = Conv1d(len(self.kernel_sizes) * channels, channels, 1, rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        outputs = []
        for k, branch in zip(self.kernel_sizes, self.branches):
            # even kernels take the extra frame on the right
            outputs.append(branch(F.pad1d(x, (k - 1) // 2, k // 2)))
        return x + self.projection(F.concat(outputs, axis=-2))


def make_block(cfg: ModelConfig, channels: int, rng: np.random.Generator, dtype=np.float32) -> Module:
    if cfg.block_type == BLOCK_APC:
        return APCBlock(channels, cfg.apc_dilations, rng, kernel_size=cfg.apc_kernel, dtype=dtype)
    return ConvBankBlock(channels, cfg.bank_kernels, rng, dtype=dtype)
