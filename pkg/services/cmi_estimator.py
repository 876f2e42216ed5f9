"""
Constrained Mutual Information Estimator

Estimates I(z_C; z_S) from both sides: a variational contrastive log-ratio
upper bound (vCLUB) and a MINE lower bound. Both estimators train jointly
with a hinge that penalizes the lower bound exceeding the upper bound.
The main model minimizes the vCLUB sample estimate with Q frozen.
"""

import logging
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from autodiff import functional as F
from autodiff.optim import Adam
from autodiff.tensor import Tensor, no_grad
from models.errors import ShapeError
from models.training import MIEstimates
from networks.cmi_networks import StatisticsNet, VariationalQNet

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))

ArrayOrTensor = Union[np.ndarray, Tensor]


def _as_tensor(x: ArrayOrTensor, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else np.asarray(x))


def _constant(x: ArrayOrTensor) -> Tensor:
    """Detached copy: no gradient may flow back into the producer."""
    return Tensor(x.data if isinstance(x, Tensor) else np.asarray(x))


def q_log_prob(q: VariationalQNet, z_c_frame: ArrayOrTensor, z_s: ArrayOrTensor) -> Tensor:
    """
    Log-density of content frames under the diagonal Gaussian Q(. | z_S).

    Args:
        q: Variational network
        z_c_frame: Content frame(s) [..., d_c]
        z_s: Speaker code(s) [..., d_s], leading dims matching z_c_frame

    Returns:
        Log-probabilities [...]
    """
    z_c_frame, z_s = _as_tensor(z_c_frame), _as_tensor(z_s)
    mu, logvar = q(z_s)
    d = z_c_frame.shape[-1]
    diff = z_c_frame - mu
    quad = (diff * diff * (-logvar).exp()).sum(axis=-1)
    return (logvar.sum(axis=-1) + quad + d * LOG_2PI) * -0.5


def _log_q_terms(q: VariationalQNet, z_c: Tensor, z_s: Tensor) -> Tuple[Tensor, Tensor]:
    """
    Positive and all-pairs log Q values.

    Returns:
        positive [N, L] = log Q(z_C[n, l] | z_S[n]),
        pairs [N, N, L] with pairs[m, n, l] = log Q(z_C[m, l] | z_S[n])
    """
    if z_c.ndim != 3 or z_s.ndim != 2 or z_c.shape[0] != z_s.shape[0]:
        raise ShapeError(f"expected z_C [N, L, d_c] and z_S [N, d_s], got {z_c.shape} and {z_s.shape}")
    n, _, d = z_c.shape
    mu, logvar = q(z_s)
    inv_var = (-logvar).exp()
    const = logvar.sum(axis=-1) + d * LOG_2PI

    diff_pos = z_c - mu.reshape((n, 1, d))
    positive = (const.reshape((n, 1))
                + (diff_pos * diff_pos * inv_var.reshape((n, 1, d))).sum(axis=-1)) * -0.5

    diff_all = z_c.reshape((n, 1) + z_c.shape[1:]) - mu.reshape((1, n, 1, d))
    pairs = (const.reshape((1, n, 1))
             + (diff_all * diff_all * inv_var.reshape((1, n, 1, d))).sum(axis=-1)) * -0.5
    return positive, pairs


def club_upper(q: VariationalQNet, z_c: ArrayOrTensor, z_s: ArrayOrTensor) -> Tensor:
    """
    vCLUB estimate: mean positive log Q minus mean over all (m, n) pairs.

    Args:
        z_c: Content frames [N, L, d_c]
        z_s: Speaker codes [N, d_s]
    """
    positive, pairs = _log_q_terms(q, _as_tensor(z_c), _as_tensor(z_s))
    return positive.mean() - pairs.mean()


def marginal_permutation(n: int, seed: int) -> np.ndarray:
    """Random in-batch shuffle without fixed points (a uniformly random n-cycle)."""
    if n < 2:
        raise ShapeError(f"marginal sampling needs at least 2 items, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    perm = np.empty(n, dtype=np.int64)
    perm[order] = np.roll(order, -1)
    return perm


def _critic_terms(t: StatisticsNet, z_c: Tensor, z_s: Tensor, shuffle_seed: int) -> Tuple[Tensor, Tensor]:
    n = z_c.shape[0]
    if n < 2:
        raise ShapeError(f"MINE needs a batch of at least 2, got {n}")
    perm = marginal_permutation(n, shuffle_seed)
    joint = t(z_c, z_s)
    marginal = t(z_c, F.index_select(z_s, perm, axis=0))
    return joint, marginal


def _mine_from_terms(joint: Tensor, marginal: Tensor) -> Tensor:
    count = marginal.size
    return joint.mean() - (F.logsumexp(marginal.reshape((-1,)), axis=0) - float(np.log(count)))


def mine_lower(t: StatisticsNet, z_c: ArrayOrTensor, z_s: ArrayOrTensor, shuffle_seed: int) -> Tensor:
    """
    MINE estimate: mean critic over joint pairs minus log mean exp(critic)
    over pairs whose speaker codes were shuffled across the batch.

    Raises:
        ShapeError: If the batch has fewer than 2 items
    """
    joint, marginal = _critic_terms(t, _as_tensor(z_c), _as_tensor(z_s), shuffle_seed)
    return _mine_from_terms(joint, marginal)


class MineEMA:
    """Running mean of E[exp(T)] over product samples for the bias-corrected MINE gradient."""

    def __init__(self, decay: float = 0.99):
        self.decay = decay
        self.value: Optional[float] = None

    def update(self, batch_value: float) -> float:
        if self.value is None:
            self.value = batch_value
        else:
            self.value = self.decay * self.value + (1.0 - self.decay) * batch_value
        return self.value


def cmi_train_step(q: VariationalQNet, t: StatisticsNet, z_c: ArrayOrTensor, z_s: ArrayOrTensor,
                   optimizer: Adam, shuffle_seed: int, use_lower_bound: bool = True,
                   ema: Optional[MineEMA] = None) -> MIEstimates:
    """
    One joint optimization step of both estimators.

    Minimizes q_nll + t_loss + max(0, I_lower - I_upper). Inputs are
    detached first so nothing flows into the model that produced them.

    Returns:
        MIEstimates; `skipped` is set when the loss was not finite
    """
    z_c, z_s = _constant(z_c), _constant(z_s)
    positive, pairs = _log_q_terms(q, z_c, z_s)
    positive_mean = positive.mean()
    upper = positive_mean - pairs.mean()
    q_nll = -positive_mean
    loss = q_nll

    zero = Tensor(np.zeros((), dtype=positive.dtype))
    lower, t_loss, gap = zero, zero, zero
    if use_lower_bound:
        joint, marginal = _critic_terms(t, z_c, z_s, shuffle_seed)
        lower = _mine_from_terms(joint, marginal)
        t_loss = -lower
        gap = F.relu(lower - upper)
        if ema is not None:
            exp_marginal = marginal.exp().mean()
            running = ema.update(float(exp_marginal.item()))
            loss = loss - (joint.mean() - exp_marginal * (1.0 / running)) + gap
        else:
            loss = loss + t_loss + gap

    estimates = MIEstimates(upper=upper.item(), lower=lower.item(), q_nll=q_nll.item(),
                            t_loss=t_loss.item(), gap_penalty=gap.item())
    optimizer.zero_grad()
    if not F.is_finite(loss):
        estimates.skipped = True
        logger.warning(f"Skipping CMI step with non-finite loss: {estimates.to_dict()}")
        return estimates

    loss.backward()
    optimizer.step()
    return estimates


def mi_loss(q: VariationalQNet, z_c: ArrayOrTensor, z_s: ArrayOrTensor,
            swapped_sign: bool = False, floor: Optional[float] = None) -> Tensor:
    """
    MI loss for the main model: the vCLUB sample estimate computed with Q
    frozen, so gradients reach only z_C and z_S.

    `swapped_sign=True` returns the negated (numerator/denominator swapped) form.
    With `floor`, values below it are clipped and pass no gradient; a
    negative estimate means z_C has drifted away from the frozen Q.
    """
    with q.frozen():
        positive, pairs = _log_q_terms(q, _as_tensor(z_c), _as_tensor(z_s))
    value = positive.mean() - pairs.mean()
    if swapped_sign:
        value = -value
    if floor is not None:
        value = F.relu(value - floor) + floor
    return value


class CMIEstimator:
    """
    Owns the two estimator networks and their optimizer.

    Args:
        content_dim: Channels of the content code (d_c)
        speaker_dim: Length of the flattened speaker code (d_s)
        hidden: Hidden width of both networks
        lr: Learning rate of the estimator optimizer
        use_lower_bound: Train MINE and the gap term (False gives CLUB only)
        mine_ema: Use the moving-average corrected MINE gradient
        mi_floor: Lower clip of the main-model MI loss (None disables it)
    """

    def __init__(self, content_dim: int, speaker_dim: int, hidden: int = 256, lr: float = 2e-4,
                 betas: Tuple[float, float] = (0.9, 0.99), eps: float = 1e-6, seed: int = 0,
                 use_lower_bound: bool = True, mine_ema: bool = False, ema_decay: float = 0.99,
                 swapped_sign: bool = False, mi_floor: Optional[float] = 0.0, dtype=np.float32):
        self.logger = logging.getLogger(__name__)
        rng = np.random.default_rng(seed)
        self.q = VariationalQNet(speaker_dim, content_dim, hidden, rng, dtype)
        self.t = StatisticsNet(content_dim, speaker_dim, hidden, rng, dtype)
        self.use_lower_bound = use_lower_bound
        self.swapped_sign = swapped_sign
        self.mi_floor = mi_floor
        self.ema = MineEMA(ema_decay) if mine_ema else None
        self.optimizer = Adam(self.parameters(), lr=lr, betas=betas, eps=eps)
        self.logger.debug(f"CMIEstimator initialized with {self.num_parameters()} parameters")

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        return ([(f"q.{name}", p) for name, p in self.q.named_parameters()]
                + [(f"t.{name}", p) for name, p in self.t.named_parameters()])

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state) -> None:
        for name, p in self.named_parameters():
            if name not in state or np.shape(state[name]) != p.shape:
                raise ShapeError(f"CMI parameter {name} missing or misshaped")
            p.data = np.asarray(state[name]).astype(p.dtype, copy=True)

    def snapshot(self) -> Dict[str, Any]:
        """Parameters, optimizer moments and MINE average, for `rollback`."""
        return {"params": self.state_dict(), "optimizer": self.optimizer.state_dict(),
                "ema": self.ema.value if self.ema else None}

    def rollback(self, snapshot: Dict[str, Any]) -> None:
        self.load_state_dict(snapshot["params"])
        self.optimizer.load_state_dict(snapshot["optimizer"])
        if self.ema is not None:
            self.ema.value = snapshot["ema"]

    def train_step(self, z_c: ArrayOrTensor, z_s: ArrayOrTensor, shuffle_seed: int) -> MIEstimates:
        return cmi_train_step(self.q, self.t, z_c, z_s, self.optimizer, shuffle_seed,
                              use_lower_bound=self.use_lower_bound, ema=self.ema)

    def mi_loss(self, z_c: ArrayOrTensor, z_s: ArrayOrTensor) -> Tensor:
        return mi_loss(self.q, z_c, z_s, swapped_sign=self.swapped_sign, floor=self.mi_floor)

    def estimate(self, z_c: ArrayOrTensor, z_s: ArrayOrTensor, shuffle_seed: int) -> MIEstimates:
        """Evaluate both bounds without updating anything."""
        with no_grad():
            positive, pairs = _log_q_terms(self.q, _constant(z_c), _constant(z_s))
            upper = positive.mean() - pairs.mean()
            lower = mine_lower(self.t, _constant(z_c), _constant(z_s), shuffle_seed)
        gap = max(0.0, lower.item() - upper.item())
        return MIEstimates(upper=upper.item(), lower=lower.item(), q_nll=-positive.mean().item(),
                           t_loss=-lower.item(), gap_penalty=gap)
