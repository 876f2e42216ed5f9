"""
Trainer

Two-phase training iteration:

  1. `inner_cmi_steps` updates of the CMI estimator on detached
     (z_C, z_S) from the current model;
  2. one Adam step of the model on
     recon + l1*kl + l2*siamese + l3*mi, with the estimator frozen.
"""

import logging
import time
from pathlib import Path
from typing import Iterable, List, Optional, Union

import numpy as np

from autodiff import functional as F
from autodiff.optim import Adam
from autodiff.tensor import Tensor, no_grad
from models.audio import MelConfig, NormalizationStats
from models.errors import GradientLeakError, ShapeError
from models.network import ModelConfig
from models.training import LambdaSchedule, LossReport, MIEstimates, TrainConfig
from networks.srd_model import MAIN, SIBLING, SRDModel, time_shuffle
from services.checkpoint_manager import Checkpoint, load_checkpoint, save_checkpoint
from services.cmi_estimator import CMIEstimator
from services.incident_service import IncidentTracker
from services.losses import kl_loss, recon_loss, siamese_loss
from services.pair_fetcher import PairBatch, derive_seed
from services.telemetry_service import TelemetryService

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "step_{step:08d}.ckpt"
LATEST_NAME = "latest.ckpt"


def _has_gradient(params: List[Tensor]) -> bool:
    return any(p.grad is not None and np.any(p.grad != 0) for p in params)


class Trainer:
    """
    Owns the model, the CMI estimator, both optimizers and the step counter.

    Args:
        mel_config: Front-end settings (stored in checkpoints)
        model_config: Network topology
        train_config: Optimization settings and ablation mode
        normalization: Per-bin statistics the batches were standardized with
        telemetry: Metrics sink (a memory-only one is created if omitted)
        dtype: Parameter precision
    """

    def __init__(self, mel_config: MelConfig, model_config: ModelConfig, train_config: TrainConfig,
                 normalization: Optional[NormalizationStats] = None,
                 telemetry: Optional[TelemetryService] = None, dtype=np.float32):
        self.logger = logging.getLogger(__name__)
        self.mel_config = mel_config
        self.model_config = model_config
        self.train_config = train_config
        self.mode = train_config.ablation_mode
        self.normalization = normalization or NormalizationStats.identity(model_config.n_mels)
        self.telemetry = telemetry or TelemetryService()
        self.incidents = IncidentTracker(max_consecutive=train_config.max_consecutive_incidents)
        self.schedule = LambdaSchedule(warmup_steps=train_config.warmup_steps)

        self.model = SRDModel(model_config, seed=train_config.seed, dtype=dtype)
        self.optimizer = Adam(self.model.parameters(), lr=train_config.lr,
                              betas=(train_config.adam_beta1, train_config.adam_beta2),
                              eps=train_config.adam_eps)

        self.cmi: Optional[CMIEstimator] = None
        if self.mode.uses_cmi:
            self.cmi = CMIEstimator(
                content_dim=model_config.content_channels,
                speaker_dim=model_config.speaker_code_dim,
                hidden=train_config.cmi_hidden,
                lr=train_config.cmi_lr,
                betas=(train_config.adam_beta1, train_config.adam_beta2),
                eps=train_config.adam_eps,
                seed=train_config.seed + 1,
                use_lower_bound=self.mode.uses_lower_bound,
                mine_ema=train_config.mine_ema,
                ema_decay=train_config.ema_decay,
                swapped_sign=train_config.mi_swapped_sign,
                mi_floor=train_config.mi_floor,
                dtype=dtype,
            )

        self.step = 0
        self.logger.info(f"Trainer initialized: mode={self.mode.value}, "
                         f"model params={self.model.num_parameters()}, "
                         f"cmi params={self.cmi.num_parameters() if self.cmi else 0}")

    # ----------------------------------------------------------------- phases

    def _speaker_input(self, z: np.ndarray, step: int) -> np.ndarray:
        if not self.mode.uses_siamese:
            return z
        rng = np.random.default_rng(derive_seed(self.train_config.seed, step, "shuffle"))
        return time_shuffle(z, self.model_config.ts_chunk, rng)

    def _cmi_phase(self, z: np.ndarray, speaker_input: np.ndarray, step: int) -> Optional[MIEstimates]:
        if self.cmi is None:
            return None
        with no_grad():
            content = self.model.content_encode(z)
            _, code = self.model.speaker_encode(speaker_input, MAIN)
        z_c, z_s = content.frames(), code.flatten()

        self.model.zero_grad()
        estimates = None
        for k in range(self.train_config.inner_cmi_steps):
            estimates = self.cmi.train_step(z_c, z_s, derive_seed(self.train_config.seed, step, "mine", k))
            self.telemetry.record_cmi(step, estimates)
            if estimates.skipped:
                self.incidents.record_incident(step, "cmi_skipped", f"non-finite CMI loss at inner step {k}")
        if self.train_config.check_isolation and _has_gradient(self.model.parameters()):
            raise GradientLeakError(f"step {step}: model parameters received gradient during the CMI phase")
        return estimates

    def _check_mi_range(self, estimates: Optional[MIEstimates], step: int) -> bool:
        """Record an incident when the upper bound left the plausible range."""
        if estimates is None or estimates.skipped:
            return True
        limit = self.train_config.mi_range_limit
        if np.isfinite(estimates.upper) and abs(estimates.upper) <= limit:
            return True
        self.incidents.record_incident(step, "mi_out_of_range",
                                       f"MI upper bound {estimates.upper:.4g} outside +-{limit:g}")
        return False

    def train_step(self, batch: PairBatch) -> LossReport:
        """
        One full iteration on a batch of pairs.

        Returns:
            LossReport; `aborted` is set when the total was not finite, in
            which case neither the model nor the estimator changed
        """
        if len(batch) < 2:
            raise ShapeError(f"batch size must be >= 2, got {len(batch)}")
        step = self.step
        z = np.asarray(batch.z, dtype=self.model.dtype)
        z_prime = np.asarray(batch.z_prime, dtype=self.model.dtype)
        lambda1, lambda2, lambda3 = self.schedule(step)
        if not self.mode.uses_siamese:
            lambda2 = 0.0

        speaker_input = self._speaker_input(z, step)
        cmi_snapshot = self.cmi.snapshot() if self.cmi is not None else None
        estimates = self._cmi_phase(z, speaker_input, step)
        in_range = self._check_mi_range(estimates, step)

        self.model.zero_grad()
        if self.cmi is not None:
            self.cmi.zero_grad()

        embedding, code = self.model.speaker_encode(speaker_input, MAIN)
        content = self.model.content_encode(z)
        z_hat = self.model.decode(content, code)

        zero = Tensor(np.zeros((), dtype=self.model.dtype))
        recon = recon_loss(z, z_hat)
        kl = kl_loss(content)
        siamese = zero
        if self.mode.uses_siamese:
            sibling_embedding, _ = self.model.speaker_encode(z_prime, SIBLING)
            siamese = siamese_loss(embedding, sibling_embedding)
        mi = self.cmi.mi_loss(content.frames(), code.flatten()) if self.cmi is not None else zero

        total = (recon.astype(np.float64) + kl.astype(np.float64) * lambda1
                 + siamese.astype(np.float64) * lambda2 + mi.astype(np.float64) * lambda3)

        report = LossReport(recon=recon.item(), kl=kl.item(), siamese=siamese.item(), mi=mi.item(),
                            total=total.item(), lambda1=lambda1, lambda2=lambda2, lambda3=lambda3,
                            step=step,
                            mi_upper=estimates.upper if estimates else None,
                            mi_lower=estimates.lower if estimates else None)

        if not F.is_finite(total):
            report.aborted = True
            self.model.zero_grad()
            if cmi_snapshot is not None:
                self.cmi.rollback(cmi_snapshot)
            self.step += 1
            self.incidents.record_incident(step, "aborted", f"non-finite total loss {report.total}")
            return report

        total.backward()
        if (self.train_config.check_isolation and self.cmi is not None
                and _has_gradient(self.cmi.parameters())):
            raise GradientLeakError(f"step {step}: CMI parameters received gradient during the model phase")
        self.optimizer.step()
        self.step += 1
        if in_range:
            self.incidents.record_success(step)
        return report

    # ----------------------------------------------------------------- loop

    def fit(self, batches: Iterable[PairBatch], total_steps: Optional[int] = None,
            out_dir: Optional[Union[str, Path]] = None) -> List[LossReport]:
        """
        Train until `total_steps` steps have completed.

        Args:
            batches: Batch source, normally `PairBatchFetcher.batches(trainer.step, total)`
            total_steps: Stop after this many completed steps (defaults to the config)
            out_dir: Directory for periodic and final checkpoints (None skips them)

        Returns:
            LossReports of the steps run
        """
        total_steps = self.train_config.total_steps if total_steps is None else total_steps
        reports = []
        for batch in batches:
            if self.step >= total_steps:
                break
            started = time.perf_counter()
            report = self.train_step(batch)
            self.telemetry.record_step(report, time.perf_counter() - started)
            reports.append(report)

            if report.step % self.train_config.log_every == 0 or report.aborted:
                self.telemetry.write_log(report)
                self.logger.info(f"step {report.step}: total={report.total:.4f} recon={report.recon:.4f} "
                                 f"kl={report.kl:.4f} siamese={report.siamese:.4f} mi={report.mi:.4f}")
            if out_dir is not None and self.step % self.train_config.checkpoint_every == 0:
                self.save(Path(out_dir) / CHECKPOINT_NAME.format(step=self.step))

        if out_dir is not None:
            self.save(Path(out_dir) / LATEST_NAME)
        return reports

    # ------------------------------------------------------------ persistence

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            mel_config=self.mel_config,
            model_config=self.model_config,
            train_config=self.train_config,
            step=self.step,
            seed=self.train_config.seed,
            model_state=self.model.state_dict(),
            normalization=self.normalization,
            cmi_state=self.cmi.state_dict() if self.cmi else {},
            optimizer_state=self.optimizer.state_dict(),
            cmi_optimizer_state=self.cmi.optimizer.state_dict() if self.cmi else None,
            mine_ema=self.cmi.ema.value if self.cmi and self.cmi.ema else None,
        )

    def save(self, path: Union[str, Path]) -> Path:
        return save_checkpoint(self.checkpoint(), path)

    def restore(self, ckpt: Checkpoint) -> None:
        """Load parameters, optimizer moments and the step counter from `ckpt`."""
        self.model.load_state_dict(ckpt.model_state)
        if ckpt.optimizer_state is not None:
            self.optimizer.load_state_dict(ckpt.optimizer_state)
        if self.cmi is not None:
            self.cmi.load_state_dict(ckpt.cmi_state)
            if ckpt.cmi_optimizer_state is not None:
                self.cmi.optimizer.load_state_dict(ckpt.cmi_optimizer_state)
            if self.cmi.ema is not None:
                self.cmi.ema.value = ckpt.mine_ema
        self.normalization = ckpt.normalization
        self.step = ckpt.step
        self.logger.info(f"Restored training state at step {self.step}")

    @classmethod
    def from_checkpoint(cls, path: Union[str, Path], telemetry: Optional[TelemetryService] = None,
                        ablation: Optional[str] = None) -> "Trainer":
        """Rebuild a trainer from a checkpoint file to resume training."""
        ckpt = load_checkpoint(path)
        train_config = ckpt.train_config
        if ablation is not None and ablation != train_config.ablation:
            logger.warning(f"Ignoring --ablation {ablation}: checkpoint was trained with {train_config.ablation}")
        trainer = cls(ckpt.mel_config, ckpt.model_config, train_config,
                      normalization=ckpt.normalization, telemetry=telemetry)
        trainer.restore(ckpt)
        return trainer
