"""Networks of the constrained MI estimator (training-time only)."""

from typing import Tuple

import numpy as np

from autodiff import functional as F
from autodiff.tensor import Tensor
from networks.layers import Linear, Module

LOGVAR_MIN = -10.0
LOGVAR_MAX = 10.0


class VariationalQNet(Module):
    """
    Diagonal-Gaussian approximation Q(z_C | z_S): two MLPs map the speaker
    code to a mean and a clamped log-variance over the content channels.
    """

    def __init__(self, speaker_dim: int, content_dim: int, hidden: int,
                 rng: np.random.Generator, dtype=np.float32):
        self.content_dim = content_dim
        self.mu_hidden = Linear(speaker_dim, hidden, rng, dtype=dtype)
        self.mu_out = Linear(hidden, content_dim, rng, dtype=dtype)
        self.logvar_hidden = Linear(speaker_dim, hidden, rng, dtype=dtype)
        self.logvar_out = Linear(hidden, content_dim, rng, dtype=dtype)

    def __call__(self, z_s: Tensor) -> Tuple[Tensor, Tensor]:
        mu = self.mu_out(F.leaky_relu(self.mu_hidden(z_s)))
        logvar = self.logvar_out(F.leaky_relu(self.logvar_hidden(z_s)))
        return mu, F.clamp(logvar, LOGVAR_MIN, LOGVAR_MAX)


class StatisticsNet(Module):
    """
    Critic T(z_C frame, z_S) -> scalar.

    The first layer acts on the concatenation [z_C, z_S]; it is split into a
    content part and a speaker part so one speaker vector can broadcast over
    all frames of its utterance.
    """

    def __init__(self, content_dim: int, speaker_dim: int, hidden: int,
                 rng: np.random.Generator, dtype=np.float32):
        self.content_in = Linear(content_dim, hidden, rng, dtype=dtype)
        self.speaker_in = Linear(speaker_dim, hidden, rng, bias=False, dtype=dtype)
        self.hidden = Linear(hidden, hidden, rng, dtype=dtype)
        self.out = Linear(hidden, 1, rng, dtype=dtype)

    def __call__(self, z_c: Tensor, z_s: Tensor) -> Tensor:
        """
        Args:
            z_c: Content frames [N, L, d_c]
            z_s: Speaker codes [N, d_s]

        Returns:
            Critic values [N, L]
        """
        speaker = self.speaker_in(z_s)
        h = self.content_in(z_c) + speaker.reshape((speaker.shape[0], 1, speaker.shape[1]))
        h = F.leaky_relu(self.hidden(F.leaky_relu(h)))
        values = self.out(h)
        return values.reshape(values.shape[:-1])
