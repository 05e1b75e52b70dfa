from datetime import UTC, datetime

import pytest

from ragsim.replay import ReplayManager, compare_reports, report_differences
from ragsim.report import ExperimentReport


def test_replay_reproduces_a_virtual_run(logged_run, run_logger):
    result = ReplayManager(run_logger).replay_run(logged_run.run_id)
    assert result["comparable"]
    assert result["match"], result["differences"]
    assert result["differences"] == []
    assert result["original_run"]["run_id"] == logged_run.run_id


def test_replay_of_a_failed_run_is_refused(run_logger):
    run_logger.log_run("failed", {}, None, datetime.now(UTC), error="boom")
    with pytest.raises(ValueError, match="no stored report"):
        ReplayManager(run_logger).replay_run("failed")


def test_replay_of_an_unknown_run(run_logger):
    with pytest.raises(FileNotFoundError):
        ReplayManager(run_logger).replay_run("missing")


def test_report_differences_name_the_fields():
    a = ExperimentReport(strategy="hedra", clock="virtual", makespan_ms=1.0, wallclock_ms=3.0)
    b = a.model_copy(update={"makespan_ms": 2.0, "wallclock_ms": 4.0})
    assert not compare_reports(a, b)
    assert report_differences(a, b) == ["makespan_ms"]
