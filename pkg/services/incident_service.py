"""
Incident Service

Tracks training incidents (skipped CMI steps, aborted main steps) and
degrades the run state when they repeat.
"""

import logging
from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from typing import Any, Dict, List, Optional

from models.errors import TrainingDivergedError


class RunState(Enum):
    """Operational states of a training run."""
    OPERATIONAL = "operational"
    DEGRADED = "degraded"
    FAILED = "failed"


@dataclass
class Incident:
    """One recorded incident."""
    step: int
    kind: str
    message: str
    timestamp: datetime = field(default_factory=datetime.now)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "step": self.step,
            "kind": self.kind,
            "message": self.message,
            "timestamp": self.timestamp.isoformat(),
        }


class IncidentTracker:
    """
    Consecutive-incident state machine.

    OPERATIONAL -> DEGRADED after `degraded_after` consecutive incidents,
    -> FAILED after `max_consecutive`, which raises TrainingDivergedError.
    A clean step resets to OPERATIONAL.
    """

    def __init__(self, max_consecutive: int = 10, degraded_after: int = 2, history: int = 100):
        self.logger = logging.getLogger(__name__)
        self.max_consecutive = max_consecutive
        self.degraded_after = degraded_after
        self.history = history

        self.state = RunState.OPERATIONAL
        self.consecutive = 0
        self.total = 0
        self.incidents: List[Incident] = []

    def record_success(self, step: int) -> None:
        previous = self.state
        self.state = RunState.OPERATIONAL
        self.consecutive = 0
        if previous is not RunState.OPERATIONAL:
            self.logger.info(f"Training recovered at step {step} (was {previous.value})")

    def record_incident(self, step: int, kind: str, message: str) -> RunState:
        """
        Record an incident and update the run state.

        Raises:
            TrainingDivergedError: When the consecutive count reaches max_consecutive
        """
        incident = Incident(step=step, kind=kind, message=message)
        self.incidents.append(incident)
        if len(self.incidents) > self.history:
            self.incidents = self.incidents[-self.history:]
        self.consecutive += 1
        self.total += 1

        if self.consecutive >= self.max_consecutive:
            self.state = RunState.FAILED
        elif self.consecutive >= self.degraded_after:
            self.state = RunState.DEGRADED

        self.logger.error(f"Step {step} {kind} (consecutive: {self.consecutive}): {message}")
        if self.state is RunState.FAILED:
            raise TrainingDivergedError(
                f"{self.consecutive} consecutive incidents, last at step {step}: {message}")
        return self.state

    @property
    def last_incident(self) -> Optional[Incident]:
        return self.incidents[-1] if self.incidents else None

    def get_status(self) -> Dict[str, Any]:
        last = self.last_incident
        return {
            "state": self.state.value,
            "consecutive": self.consecutive,
            "total": self.total,
            "last_incident": last.to_dict() if last else None,
        }
