"""
Telemetry Service

Collects training metrics (loss terms, MI estimates, step timings) in
bounded histories and writes the JSON-lines training log.
"""

import json
import logging
from collections import defaultdict, deque
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Optional, Union

from models.training import LossReport, MIEstimates

LOSS_FIELDS = ("recon", "kl", "siamese", "mi", "total")


@dataclass
class MetricPoint:
    """Single metric data point."""
    step: int
    value: float
    timestamp: datetime = field(default_factory=datetime.now)


class MetricsCollector:
    """Per-metric histories capped at `max_points_per_metric`."""

    def __init__(self, max_points_per_metric: int = 1000):
        self.max_points_per_metric = max_points_per_metric
        self.metrics: Dict[str, deque] = defaultdict(lambda: deque(maxlen=max_points_per_metric))
        self.counters: Dict[str, int] = defaultdict(int)

        self.logger = logging.getLogger(f"{__name__}.MetricsCollector")

    def record_counter(self, name: str, step: int, value: int = 1) -> None:
        self.counters[name] += value
        self.metrics[name].append(MetricPoint(step=step, value=self.counters[name]))

    def record_value(self, name: str, step: int, value: float) -> None:
        self.metrics[name].append(MetricPoint(step=step, value=float(value)))

    def get_metric_summary(self, name: str) -> Dict[str, Any]:
        """
        Summary statistics for a metric.

        Returns:
            Dictionary with count, min, max, avg, latest and the step range
        """
        if name not in self.metrics or not self.metrics[name]:
            return {"error": f"Metric {name} not found"}

        points = list(self.metrics[name])
        values = [p.value for p in points]
        return {
            "count": len(values),
            "min": min(values),
            "max": max(values),
            "avg": sum(values) / len(values),
            "latest": values[-1],
            "first_step": points[0].step,
            "last_step": points[-1].step,
        }

    def get_all_metrics(self) -> Dict[str, Any]:
        return {
            "counters": dict(self.counters),
            "metrics_count": {name: len(points) for name, points in self.metrics.items()},
        }


class TelemetryService:
    """
    Training telemetry: metric histories plus an optional `train_log.jsonl`.

    Args:
        log_path: JSON-lines file to append to (None keeps metrics in memory only)
        max_points_per_metric: History length per metric
    """

    def __init__(self, log_path: Optional[Union[str, Path]] = None, max_points_per_metric: int = 1000):
        self.logger = logging.getLogger(__name__)
        self.collector = MetricsCollector(max_points_per_metric)
        self.log_path = Path(log_path) if log_path else None
        if self.log_path is not None:
            self.log_path.parent.mkdir(parents=True, exist_ok=True)

    def record_step(self, report: LossReport, seconds: Optional[float] = None) -> None:
        if report.aborted:
            self.collector.record_counter("aborted_steps", report.step)
            return
        for name in LOSS_FIELDS:
            self.collector.record_value(name, report.step, getattr(report, name))
        if report.mi_upper is not None:
            self.collector.record_value("mi_upper", report.step, report.mi_upper)
        if report.mi_lower is not None:
            self.collector.record_value("mi_lower", report.step, report.mi_lower)
        if seconds is not None:
            self.collector.record_value("step_seconds", report.step, seconds)

    def record_cmi(self, step: int, estimates: MIEstimates) -> None:
        if estimates.skipped:
            self.collector.record_counter("skipped_cmi_steps", step)
            return
        self.collector.record_value("cmi_gap_penalty", step, estimates.gap_penalty)
        self.collector.record_value("cmi_q_nll", step, estimates.q_nll)

    def write_log(self, report: LossReport) -> None:
        """Append one JSON object mirroring the LossReport."""
        if self.log_path is None:
            return
        with open(self.log_path, 'a', encoding='utf-8') as handle:
            handle.write(json.dumps(report.to_dict()) + "\n")

    def summary(self) -> Dict[str, Any]:
        names = LOSS_FIELDS + ("mi_upper", "mi_lower", "step_seconds")
        return {name: self.collector.get_metric_summary(name)
                for name in names if name in self.collector.metrics}
