import json

import pytest

from models.errors import TrainingDivergedError
from models.training import LossReport, MIEstimates
from services.incident_service import IncidentTracker, RunState
from services.telemetry_service import MetricsCollector, TelemetryService


def make_report(step, total=1.0, aborted=False):
    return LossReport(recon=total, kl=0.0, siamese=0.0, mi=0.0, total=total,
                      lambda1=0.0, lambda2=1.0, lambda3=0.0, step=step, aborted=aborted)


@pytest.mark.unit
class TestIncidentTracker:
    def test_degrades_then_recovers(self):
        tracker = IncidentTracker(max_consecutive=5, degraded_after=2)
        assert tracker.record_incident(0, "aborted", "nan") is RunState.OPERATIONAL
        assert tracker.record_incident(1, "aborted", "nan") is RunState.DEGRADED
        tracker.record_success(2)
        assert tracker.state is RunState.OPERATIONAL
        assert tracker.get_status()["consecutive"] == 0
        assert tracker.get_status()["total"] == 2

    def test_fails_after_max_consecutive(self):
        tracker = IncidentTracker(max_consecutive=3)
        tracker.record_incident(0, "aborted", "nan")
        tracker.record_incident(1, "aborted", "nan")
        with pytest.raises(TrainingDivergedError):
            tracker.record_incident(2, "aborted", "nan")
        assert tracker.state is RunState.FAILED

    def test_history_is_bounded(self):
        tracker = IncidentTracker(max_consecutive=1000, history=3)
        for step in range(10):
            tracker.record_incident(step, "cmi_skipped", "inf")
        assert [i.step for i in tracker.incidents] == [7, 8, 9]
        assert tracker.last_incident.to_dict()["kind"] == "cmi_skipped"


@pytest.mark.unit
class TestTelemetry:
    def test_metric_summary(self):
        collector = MetricsCollector(max_points_per_metric=3)
        for step, value in enumerate([4.0, 1.0, 2.0, 3.0]):
            collector.record_value("recon", step, value)
        summary = collector.get_metric_summary("recon")
        assert summary["count"] == 3
        assert (summary["min"], summary["max"], summary["latest"]) == (1.0, 3.0, 3.0)
        assert (summary["first_step"], summary["last_step"]) == (1, 3)

    def test_records_steps_and_log(self, tmp_path):
        log_path = tmp_path / "run" / "train_log.jsonl"
        telemetry = TelemetryService(log_path)
        telemetry.record_step(make_report(0, 2.0), seconds=0.1)
        telemetry.record_step(make_report(1, aborted=True))
        telemetry.record_cmi(0, MIEstimates(upper=1.0, lower=0.5, q_nll=2.0, t_loss=-0.5, gap_penalty=0.0))
        telemetry.write_log(make_report(0, 2.0))

        summary = telemetry.summary()
        assert summary["total"]["latest"] == 2.0
        assert summary["step_seconds"]["count"] == 1
        assert telemetry.collector.get_metric_summary("aborted_steps")["count"] == 1

        lines = log_path.read_text().splitlines()
        assert json.loads(lines[0])["total"] == 2.0

    def test_memory_only_log_is_a_no_op(self):
        TelemetryService().write_log(make_report(0))
