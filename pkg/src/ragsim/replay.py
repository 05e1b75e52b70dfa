from typing import Dict, Any, List, Optional
from datetime import datetime, UTC

from .logging import RunLogger, RunLog
from .report import ExperimentReport, comparable
from .scheduler import execute_run
from .types import Clock, RunConfig


class ReplayManager:
    def __init__(self, logger: Optional[RunLogger] = None):
        # Same database the CLI logs runs into
        self.logger = logger or RunLogger(echo=False)

    def get_run(self, run_id: str) -> RunLog:
        return self.logger.get_run(run_id)

    def replay_run(self, run_id: str) -> Dict[str, Any]:
        """Re-execute a logged run on the virtual clock and compare the reports"""
        original = self.get_run(run_id)
        if original.report is None:
            raise ValueError(f"Run {run_id} has no stored report (it failed: {original.error})")

        config = RunConfig.model_validate(original.config)
        config = config.model_copy(update={
            "scheduler": config.scheduler.model_copy(update={"clock": Clock.VIRTUAL}),
        })
        replayed = execute_run(config)
        stored = ExperimentReport.model_validate(original.report)
        return {
            "original_run": original.to_dict(),
            "replay_report": replayed.model_dump(mode="json"),
            "match": compare_reports(stored, replayed),
            "differences": report_differences(stored, replayed),
            "comparable": original.clock == Clock.VIRTUAL.value,
            "timestamp": datetime.now(UTC).isoformat(),
        }


def compare_reports(original: ExperimentReport, replay: ExperimentReport) -> bool:
    """
    Compare two reports while ignoring wallclock measurements.

    Args:
        original: Report stored with the run
        replay: Report of the re-execution

    Returns:
        bool: True if every deterministic field matches
    """
    return comparable(original) == comparable(replay)


def report_differences(original: ExperimentReport, replay: ExperimentReport) -> List[str]:
    a, b = comparable(original), comparable(replay)
    return sorted(key for key in set(a) | set(b) if a.get(key) != b.get(key))
