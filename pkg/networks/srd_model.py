"""
Speech representation disentangling model.

Content path: IN-stripped conv stack. Speaker path: Siamese encoder
(`main` and `sibling` are one object) fed with time-shuffled input during
training. Decoder: AdaIN conditioned on the speaker code.
"""

import logging
from typing import List, Optional, Tuple, Union

import numpy as np

from autodiff import functional as F
from autodiff.tensor import Tensor
from models.errors import ShapeError
from models.network import (BLOCK_APC, ContentCode, ModelConfig, ParamCount,
                            SpeakerCode, SpeakerEmbedding)
from networks.encoders import ContentEncoder, Decoder, SpeakerEncoder
from networks.layers import Module

logger = logging.getLogger(__name__)

FeatureInput = Union[np.ndarray, Tensor]
MAIN = "main"
SIBLING = "sibling"


def time_shuffle_indices(n_frames: int, chunk: int, rng: np.random.Generator) -> np.ndarray:
    """Frame order after permuting consecutive chunks (last chunk may be short)."""
    if chunk < 1:
        raise ShapeError(f"chunk must be >= 1, got {chunk}")
    starts = np.arange(0, n_frames, chunk)
    order = rng.permutation(len(starts))
    return np.concatenate([np.arange(starts[i], min(starts[i] + chunk, n_frames)) for i in order])


def time_shuffle(z: FeatureInput, chunk: int, rng: np.random.Generator) -> FeatureInput:
    """
    Permute chunks of frames along the last axis.

    Batched input [N, M, T] gets an independent permutation per item.
    The multiset of frame columns is preserved exactly.
    """
    data = z.data if isinstance(z, Tensor) else np.asarray(z)
    n_frames = data.shape[-1]
    if data.ndim == 3:
        indices = [time_shuffle_indices(n_frames, chunk, rng) for _ in range(data.shape[0])]
        if isinstance(z, Tensor):
            rows = [F.index_select(z[i], idx, axis=-1) for i, idx in enumerate(indices)]
            return F.stack(rows, axis=0)
        return np.stack([data[i][:, idx] for i, idx in enumerate(indices)], axis=0)

    idx = time_shuffle_indices(n_frames, chunk, rng)
    if isinstance(z, Tensor):
        return F.index_select(z, idx, axis=-1)
    return data[..., idx]


def _as_batch(z: FeatureInput, dtype) -> Tuple[Tensor, bool]:
    if not isinstance(z, Tensor):
        z = Tensor(np.asarray(z, dtype=dtype))
    if z.ndim == 2:
        return z.reshape((1,) + z.shape), True
    if z.ndim != 3:
        raise ShapeError(f"expected [M, T] or [N, M, T] features, got {z.shape}")
    return z, False


def _unbatch(t: Tensor, squeeze: bool) -> Tensor:
    return t.reshape(t.shape[1:]) if squeeze else t


class SRDModel(Module):
    """
    Conversion-path networks: content encoder, shared speaker encoder, decoder.

    Args:
        cfg: Layer topology
        seed: Initialization seed
        dtype: Parameter precision (float32 for training, float64 for checks)
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.content_encoder = ContentEncoder(cfg, rng, dtype)
        self.speaker_encoder = SpeakerEncoder(cfg, rng, dtype)
        self.decoder = Decoder(cfg, rng, dtype)
        # Siamese twin: same object, no extra parameters
        self.sibling_encoder = self.speaker_encoder
        logger.debug(f"SRDModel initialized with {self.num_parameters()} parameters")

    # ------------------------------------------------------------ operations

    def content_encode(self, z: FeatureInput,
                       normalized_maps: Optional[List[Tensor]] = None) -> ContentCode:
        batch, squeeze = _as_batch(z, self.dtype)
        return ContentCode(_unbatch(self.content_encoder(batch, normalized_maps), squeeze))

    def speaker_encode(self, z: FeatureInput, which: str = MAIN) -> Tuple[SpeakerEmbedding, SpeakerCode]:
        if which not in (MAIN, SIBLING):
            raise ShapeError(f"which must be '{MAIN}' or '{SIBLING}', got {which!r}")
        encoder = self.speaker_encoder if which == MAIN else self.sibling_encoder
        batch, squeeze = _as_batch(z, self.dtype)
        embedding, alpha, beta = encoder(batch)
        return (SpeakerEmbedding(_unbatch(embedding, squeeze)),
                SpeakerCode(_unbatch(alpha, squeeze), _unbatch(beta, squeeze)))

    def decode(self, content: ContentCode, speaker: SpeakerCode,
               adain_maps: Optional[List[Tensor]] = None) -> Tensor:
        values = content.values
        squeeze = values.ndim == 2
        alpha, beta = speaker.alpha, speaker.beta
        if squeeze:
            values = values.reshape((1,) + values.shape)
        if alpha.ndim == 2:
            alpha = alpha.reshape((1,) + alpha.shape)
            beta = beta.reshape((1,) + beta.shape)
        if alpha.shape[0] != values.shape[0]:
            raise ShapeError(f"speaker code batch {alpha.shape[0]} != content batch {values.shape[0]}")
        return _unbatch(self.decoder(values, alpha, beta, adain_maps), squeeze)

    def reconstruct(self, z: FeatureInput, z_for_speaker: Optional[FeatureInput] = None,
                    rng: Optional[np.random.Generator] = None, shuffle: bool = True) -> Tensor:
        """
        Dec(Enc_C(Z), Enc_S(TS(Z'))) with Z' defaulting to Z.

        With `shuffle=False` (or no rng) the speaker input is used as is.
        """
        speaker_input = z if z_for_speaker is None else z_for_speaker
        if shuffle:
            if rng is None:
                raise ShapeError("reconstruct with shuffle=True needs an rng")
            speaker_input = time_shuffle(speaker_input, self.config.ts_chunk, rng)
        _, code = self.speaker_encode(speaker_input, MAIN)
        return self.decode(self.content_encode(z), code)

    def convert_codes(self, source: FeatureInput, target: FeatureInput) -> Tensor:
        """Content of `source` rendered with the voice of `target` (inference path)."""
        return self.reconstruct(source, target, shuffle=False)

    # ------------------------------------------------------------ accounting

    def param_count(self) -> ParamCount:
        breakdown = {
            'content_encoder': self.content_encoder.num_parameters(),
            'speaker_encoder': self.speaker_encoder.num_parameters(),
            'decoder': self.decoder.num_parameters(),
        }
        return ParamCount(total=self.num_parameters(), breakdown=breakdown)


def conv_params(c_in: int, c_out: int, k: int) -> int:
    return c_in * c_out * k + c_out


def block_params(cfg: ModelConfig, channels: int) -> int:
    """Closed-form parameter count of one conv block."""
    if cfg.block_type == BLOCK_APC:
        branches = len(cfg.apc_dilations) * conv_params(channels, channels, cfg.apc_kernel)
        return branches + conv_params(len(cfg.apc_dilations) * channels, channels, 1)
    branches = sum(conv_params(channels, channels, k) for k in cfg.bank_kernels)
    return branches + conv_params(len(cfg.bank_kernels) * channels, channels, 1)


def analytic_param_count(cfg: ModelConfig) -> int:
    """Conversion-path parameter count from layer shapes alone."""
    content = (conv_params(cfg.n_mels, cfg.encoder_width, 1)
               + cfg.encoder_depth * block_params(cfg, cfg.encoder_width)
               + conv_params(cfg.encoder_width, cfg.content_channels, 1))
    speaker = (conv_params(cfg.n_mels, cfg.speaker_hidden, 1)
               + cfg.speaker_depth * block_params(cfg, cfg.speaker_hidden)
               + conv_params(cfg.speaker_hidden, cfg.speaker_width, 1)
               + 2 * cfg.n_adain_layers * (cfg.speaker_width * cfg.decoder_width + cfg.decoder_width))
    decoder = (conv_params(cfg.content_channels, cfg.decoder_width, 1)
               + cfg.decoder_depth * block_params(cfg, cfg.decoder_width)
               + conv_params(cfg.decoder_width, cfg.n_mels, 1))
    return content + speaker + decoder
