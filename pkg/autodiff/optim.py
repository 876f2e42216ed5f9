"""
Adam optimizer over `Tensor` parameters.

`adam_step` is the pure update rule; `Adam` binds it to a parameter list
and keeps the moment state between steps.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from autodiff.tensor import Tensor
from models.errors import ShapeError

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    """Moment estimates and hyperparameters for one parameter group."""
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-6
    lr: float = 1e-4

    @classmethod
    def fresh(cls, params: Sequence[np.ndarray], lr: float = 1e-4, beta1: float = 0.9,
              beta2: float = 0.99, eps: float = 1e-6) -> "AdamState":
        return cls(m=[np.zeros_like(p) for p in params],
                   v=[np.zeros_like(p) for p in params],
                   t=0, beta1=beta1, beta2=beta2, eps=eps, lr=lr)

    def hyperparameters(self) -> Dict[str, float]:
        return {"t": self.t, "beta1": self.beta1, "beta2": self.beta2,
                "eps": self.eps, "lr": self.lr}


def adam_step(params: Sequence[np.ndarray], grads: Sequence[Optional[np.ndarray]],
              state: AdamState) -> Tuple[List[np.ndarray], AdamState]:
    """
    One bias-corrected Adam update.

    Args:
        params: Current parameter arrays
        grads: Gradients aligned with params; None is treated as zero
        state: Moment state; not modified

    Returns:
        Updated parameter arrays and the new state

    Raises:
        ShapeError: If params, grads and moments are misaligned
    """
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ShapeError(f"adam_step got {len(params)} params, {len(grads)} grads, "
                         f"{len(state.m)} moments")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1 ** t
    correction2 = 1.0 - b2 ** t

    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape or m.shape != p.shape:
            raise ShapeError(f"adam_step shape mismatch: param {p.shape}, grad {g.shape}")
        g = g.astype(p.dtype, copy=False)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        m_hat = m / correction1
        v_hat = v / correction2
        new_params.append((p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype, copy=False))
        new_m.append(m.astype(p.dtype, copy=False))
        new_v.append(v.astype(p.dtype, copy=False))

    return new_params, AdamState(m=new_m, v=new_v, t=t, beta1=b1, beta2=b2,
                                 eps=state.eps, lr=state.lr)


class Adam:
    """
    Adam bound to a list of parameter tensors.

    Defaults follow the training recipe: beta1=0.9, beta2=0.99, eps=1e-6.
    """

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4,
                 betas: Tuple[float, float] = (0.9, 0.99), eps: float = 1e-6):
        self.params: List[Tensor] = list(params)
        self.state = AdamState.fresh([p.data for p in self.params], lr=lr,
                                     beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        new_params, self.state = adam_step([p.data for p in self.params],
                                           [p.grad for p in self.params], self.state)
        for p, data in zip(self.params, new_params):
            p.data = data

    def state_dict(self) -> Dict[str, object]:
        return {"hyper": self.state.hyperparameters(),
                "m": [m.copy() for m in self.state.m],
                "v": [v.copy() for v in self.state.v]}

    def load_state_dict(self, state: Dict[str, object]) -> None:
        hyper = state["hyper"]
        m, v = list(state["m"]), list(state["v"])
        if len(m) != len(self.params) or len(v) != len(self.params):
            raise ShapeError(f"optimizer state has {len(m)} slots for {len(self.params)} params")
        self.state = AdamState(
            m=[np.asarray(a, dtype=p.dtype).reshape(p.shape) for a, p in zip(m, self.params)],
            v=[np.asarray(a, dtype=p.dtype).reshape(p.shape) for a, p in zip(v, self.params)],
            t=int(hyper["t"]), beta1=float(hyper["beta1"]), beta2=float(hyper["beta2"]),
            eps=float(hyper["eps"]), lr=float(hyper["lr"]))
        logger.debug(f"Loaded Adam state at t={self.state.t}")
