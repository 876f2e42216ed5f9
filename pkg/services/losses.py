"""Loss terms of the main model. All are element-mean normalized."""

from typing import Tuple, Union

import numpy as np

from autodiff import functional as F
from autodiff.tensor import Tensor
from models.errors import ShapeError
from models.network import ContentCode, SpeakerEmbedding
from models.training import LambdaSchedule

ELEMENT_MEAN = "element_mean"


def _values(x) -> Tensor:
    if isinstance(x, (ContentCode, SpeakerEmbedding)):
        return x.values
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x))


def recon_loss(z: Union[np.ndarray, Tensor], z_hat: Tensor) -> Tensor:
    """Mean absolute difference over all elements."""
    z, z_hat = _values(z), _values(z_hat)
    if z.shape != z_hat.shape:
        raise ShapeError(f"reconstruction shape {z_hat.shape} != target shape {z.shape}")
    return (z_hat - z).abs().mean()


def kl_loss(z_c: Union[ContentCode, Tensor]) -> Tensor:
    """Mean squared content-code entry: pulls the content posterior toward N(0, I)."""
    values = _values(z_c)
    return (values * values).mean()


def siamese_loss(e1: Union[SpeakerEmbedding, Tensor], e2: Union[SpeakerEmbedding, Tensor]) -> Tensor:
    """
    1 - cos(e1, e2), averaged over the batch when embeddings are [N, W].

    Zero vectors get an eps-stabilized norm, so the loss is 1 for them.
    """
    a, b = _values(e1), _values(e2)
    if a.shape != b.shape:
        raise ShapeError(f"embedding shapes differ: {a.shape} vs {b.shape}")
    return (1.0 - F.cosine_similarity(a, b)).mean()


def lambda_schedule(step: int, warmup_steps: int = 20000) -> Tuple[float, float, float]:
    """(lambda1, lambda2, lambda3) at `step`."""
    return LambdaSchedule(warmup_steps=warmup_steps)(step)
