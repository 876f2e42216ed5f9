"""
Content encoder, speaker encoder and AdaIN decoder.

All three keep the frame count unchanged (no temporal downsampling).
Inputs are batched feature maps [N, channels, T].
"""

from typing import List, Optional, Tuple

import numpy as np

from autodiff import functional as F
from autodiff.tensor import Tensor
from models.errors import ShapeError
from models.network import ModelConfig
from networks.blocks import make_block
from networks.layers import Conv1d, Linear, Module


class ContentEncoder(Module):
    """
    Input projection, then per block: conv block -> IN (no affine) -> leaky-ReLU,
    then a 1x1 projection to the content channels.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        self.eps = cfg.eps
        self.slope = cfg.leaky_slope
        self.input_proj = Conv1d(cfg.n_mels, cfg.encoder_width, 1, rng, dtype=dtype)
        self.blocks = [make_block(cfg, cfg.encoder_width, rng, dtype) for _ in range(cfg.encoder_depth)]
        self.output_proj = Conv1d(cfg.encoder_width, cfg.content_channels, 1, rng, dtype=dtype)

    def __call__(self, z: Tensor, normalized_maps: Optional[List[Tensor]] = None) -> Tensor:
        h = self.input_proj(z)
        for block in self.blocks:
            h, _ = F.instance_norm(block(h), self.eps)
            if normalized_maps is not None:
                normalized_maps.append(h)
            h = F.leaky_relu(h, self.slope)
        return self.output_proj(h)


class SpeakerEncoder(Module):
    """
    Conv blocks without instance norm, average pooling over time, then one
    linear head per AdaIN layer for alpha and for beta.

    Beta heads start near 1 and alpha heads near 0 so the untrained decoder
    behaves like plain instance norm.
    """

    HEAD_INIT_SCALE = 0.01

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        self.slope = cfg.leaky_slope
        self.input_proj = Conv1d(cfg.n_mels, cfg.speaker_hidden, 1, rng, dtype=dtype)
        self.blocks = [make_block(cfg, cfg.speaker_hidden, rng, dtype) for _ in range(cfg.speaker_depth)]
        self.output_proj = Conv1d(cfg.speaker_hidden, cfg.speaker_width, 1, rng, dtype=dtype)
        self.alpha_heads = [Linear(cfg.speaker_width, cfg.decoder_width, rng,
                                   weight_scale=self.HEAD_INIT_SCALE, bias_value=0.0, dtype=dtype)
                            for _ in range(cfg.n_adain_layers)]
        self.beta_heads = [Linear(cfg.speaker_width, cfg.decoder_width, rng,
                                  weight_scale=self.HEAD_INIT_SCALE, bias_value=1.0, dtype=dtype)
                           for _ in range(cfg.n_adain_layers)]

    def embed(self, z: Tensor) -> Tensor:
        h = self.input_proj(z)
        for block in self.blocks:
            h = F.leaky_relu(block(h), self.slope)
        return F.avg_pool_time(self.output_proj(h))

    def __call__(self, z: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
        embedding = self.embed(z)
        alpha = F.stack([head(embedding) for head in self.alpha_heads], axis=-2)
        beta = F.stack([head(embedding) for head in self.beta_heads], axis=-2)
        return embedding, alpha, beta


class Decoder(Module):
    """1x1 projection, per block: conv block -> AdaIN(alpha_l, beta_l) -> leaky-ReLU, 1x1 to mels."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        self.eps = cfg.eps
        self.slope = cfg.leaky_slope
        self.width = cfg.decoder_width
        self.n_layers = cfg.n_adain_layers
        self.input_proj = Conv1d(cfg.content_channels, cfg.decoder_width, 1, rng, dtype=dtype)
        self.blocks = [make_block(cfg, cfg.decoder_width, rng, dtype) for _ in range(cfg.decoder_depth)]
        self.output_proj = Conv1d(cfg.decoder_width, cfg.n_mels, 1, rng, dtype=dtype)

    def __call__(self, content: Tensor, alpha: Tensor, beta: Tensor,
                 adain_maps: Optional[List[Tensor]] = None) -> Tensor:
        expected = (self.n_layers, self.width)
        if alpha.shape[-2:] != expected or beta.shape[-2:] != expected:
            raise ShapeError(f"speaker code must be [.., {self.n_layers}, {self.width}], "
                             f"got alpha {alpha.shape} beta {beta.shape}")
        h = self.input_proj(content)
        for layer, block in enumerate(self.blocks):
            h = F.adain(block(h), alpha[:, layer], beta[:, layer], self.eps)
            if adain_maps is not None:
                adain_maps.append(h)
            h = F.leaky_relu(h, self.slope)
        return self.output_proj(h)
