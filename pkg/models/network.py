from dataclasses import dataclass, field
from typing import Dict, List

from dataclasses_json import dataclass_json

from autodiff.functional import concat
from autodiff.tensor import Tensor
from models.errors import ShapeError

BLOCK_APC = "apc"
BLOCK_CONV_BANK = "conv_bank"


@dataclass_json
@dataclass
class ModelConfig:
    """
    Layer topology of the disentangling model.

    The reference values give about 1.49M conversion-path parameters.
    `block_type="conv_bank"` swaps every APC block for a bank of kernels
    1..8 of the same width, for lightweight comparisons.
    """

    n_mels: int = 80
    content_channels: int = 64
    encoder_width: int = 64
    speaker_hidden: int = 64
    speaker_width: int = 128
    decoder_width: int = 128
    apc_dilations: List[int] = field(default_factory=lambda: [1, 2, 4, 8])
    apc_kernel: int = 3
    encoder_depth: int = 3
    speaker_depth: int = 1
    decoder_depth: int = 4
    n_adain_layers: int = 4
    ts_chunk: int = 8
    eps: float = 1e-5
    leaky_slope: float = 0.2
    block_type: str = BLOCK_APC
    bank_kernels: List[int] = field(default_factory=lambda: list(range(1, 9)))

    def __post_init__(self):
        if self.apc_kernel != 3:
            raise ShapeError(f"APC kernel size is fixed at 3, got {self.apc_kernel}")
        if any(d < 1 for d in self.apc_dilations) or len(set(self.apc_dilations)) != len(self.apc_dilations):
            raise ShapeError(f"APC dilations must be distinct and >= 1, got {self.apc_dilations}")
        if self.n_adain_layers != self.decoder_depth:
            raise ShapeError(f"one AdaIN layer per decoder block: n_adain_layers={self.n_adain_layers}, "
                             f"decoder_depth={self.decoder_depth}")
        if self.ts_chunk < 1:
            raise ShapeError(f"ts_chunk must be >= 1, got {self.ts_chunk}")
        if self.block_type not in (BLOCK_APC, BLOCK_CONV_BANK):
            raise ShapeError(f"unknown block_type {self.block_type!r}")

    @property
    def speaker_code_dim(self) -> int:
        """Length of the flattened (alpha, beta) code."""
        return 2 * self.n_adain_layers * self.decoder_width

    @property
    def receptive_field(self) -> int:
        """Frames seen by one APC block."""
        return 1 + (self.apc_kernel - 1) * max(self.apc_dilations)


@dataclass
class ContentCode:
    """Content representation [C_c x L] (batched: [N x C_c x L])."""

    values: Tensor

    @property
    def n_frames(self) -> int:
        return self.values.shape[-1]

    def frames(self) -> Tensor:
        """Time-major view [..., L, C_c] used by the MI estimators."""
        axes = tuple(range(self.values.ndim - 2)) + (self.values.ndim - 1, self.values.ndim - 2)
        return self.values.transpose(axes)


@dataclass
class SpeakerCode:
    """Per-AdaIN-layer affine parameters; alpha/beta are [layers x channels] (batched: leading N)."""

    alpha: Tensor
    beta: Tensor

    def flatten(self) -> Tensor:
        """Concatenated (alpha, beta) vector, [N x 2*layers*channels] or [2*layers*channels]."""
        lead = self.alpha.shape[:-2]
        flat_alpha = self.alpha.reshape(lead + (-1,))
        flat_beta = self.beta.reshape(lead + (-1,))
        return concat([flat_alpha, flat_beta], axis=-1)


@dataclass
class SpeakerEmbedding:
    """Pooled speaker vector [speaker_width] (batched: [N x speaker_width])."""

    values: Tensor


@dataclass
class ParamCount:
    """Trainable scalar counts of the conversion path."""

    total: int
    breakdown: Dict[str, int]

    def to_dict(self) -> dict:
        return {'total': self.total, 'breakdown': dict(self.breakdown)}
