from dataclasses import dataclass
from enum import Enum
from typing import Dict, Optional

from dataclasses_json import dataclass_json

from models.errors import ShapeError


class AblationMode(Enum):
    """Training variants for the ablation study."""
    FULL = "full"
    M1 = "m1"   # no CMI estimator
    M2 = "m2"   # upper bound only, no MINE lower bound or gap term
    M3 = "m3"   # no Siamese encoder / time shuffle

    @property
    def uses_cmi(self) -> bool:
        return self is not AblationMode.M1

    @property
    def uses_lower_bound(self) -> bool:
        return self in (AblationMode.FULL, AblationMode.M3)

    @property
    def uses_siamese(self) -> bool:
        return self is not AblationMode.M3


@dataclass_json
@dataclass
class TrainConfig:
    """Optimization and bookkeeping settings for one training run."""

    seed: int = 0
    batch_size: int = 8
    total_steps: int = 100000
    inner_cmi_steps: int = 5
    warmup_steps: int = 20000
    lr: float = 1e-4
    cmi_lr: float = 2e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    adam_eps: float = 1e-6
    cmi_hidden: int = 256
    mine_ema: bool = False
    ema_decay: float = 0.99
    mi_swapped_sign: bool = False
    mi_floor: Optional[float] = 0.0
    mi_range_limit: float = 1000.0
    ablation: str = AblationMode.FULL.value
    checkpoint_every: int = 5000
    log_every: int = 100
    check_isolation: bool = False
    max_consecutive_incidents: int = 10
    prefetch_workers: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ShapeError(f"batch_size must be >= 2 for the MINE marginal term, got {self.batch_size}")
        if self.inner_cmi_steps < 1:
            raise ShapeError(f"inner_cmi_steps must be >= 1, got {self.inner_cmi_steps}")
        AblationMode(self.ablation)

    @property
    def ablation_mode(self) -> AblationMode:
        return AblationMode(self.ablation)


@dataclass_json
@dataclass
class LossReport:
    """Loss terms of one training step; total = recon + l1*kl + l2*siamese + l3*mi."""

    recon: float
    kl: float
    siamese: float
    mi: float
    total: float
    lambda1: float
    lambda2: float
    lambda3: float
    step: int
    aborted: bool = False
    mi_upper: Optional[float] = None
    mi_lower: Optional[float] = None
    normalization: str = "element_mean"

    def weighted_sum(self) -> float:
        return self.recon + self.lambda1 * self.kl + self.lambda2 * self.siamese + self.lambda3 * self.mi


@dataclass
class MIEstimates:
    """Outputs of one CMI evaluation or training step."""

    upper: float
    lower: float
    q_nll: float
    t_loss: float
    gap_penalty: float
    skipped: bool = False

    def to_dict(self) -> Dict[str, float]:
        return {
            'upper': self.upper,
            'lower': self.lower,
            'q_nll': self.q_nll,
            't_loss': self.t_loss,
            'gap_penalty': self.gap_penalty,
            'skipped': self.skipped,
        }


@dataclass
class LambdaSchedule:
    """Linear warm-up of the KL and MI weights; the Siamese weight stays at 1."""

    warmup_steps: int = 20000
    siamese_weight: float = 1.0

    def __call__(self, step: int):
        if step < 0:
            raise ShapeError(f"step must be >= 0, got {step}")
        ramp = 1.0 if self.warmup_steps <= 0 else min(step / self.warmup_steps, 1.0)
        return ramp, self.siamese_weight, ramp
