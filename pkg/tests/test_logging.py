from datetime import UTC, datetime

import pytest

from ragsim.logging import RunLogger, RunTracer, busy_time_by_worker, default_storage_path, read_trace, trace_frame


def test_storage_follows_the_home_variable(isolated_home):
    assert default_storage_path() == isolated_home / "runs"
    assert (RunLogger(echo=False).db_path).parent == isolated_home / "runs"


def test_logged_run_round_trips(run_logger):
    config = {"scheduler": {"strategy": "naive", "clock": "virtual"}, "workflow": "hyde"}
    entry = run_logger.log_run("run-1", config, {"completed": 3}, datetime.now(UTC))
    loaded = run_logger.get_run("run-1")
    assert loaded.strategy == "naive" and loaded.clock == "virtual"
    assert loaded.workflow == "hyde"
    assert loaded.report == {"completed": 3}
    assert loaded.error is None
    assert loaded.to_dict()["run_id"] == entry.run_id


def test_failed_runs_keep_their_error(run_logger):
    run_logger.log_run("bad", {}, None, datetime.now(UTC), error="boom")
    loaded = run_logger.get_run("bad")
    assert loaded.report is None
    assert loaded.error == "boom"
    assert loaded.strategy == "hedra"


def test_runs_filter_by_strategy_newest_first(run_logger):
    for i, strategy in enumerate(["coarse", "hedra", "hedra"]):
        started = datetime(2026, 1, 1, 0, 0, i, tzinfo=UTC)
        run_logger.log_run(f"r{i}", {"scheduler": {"strategy": strategy}}, {}, started)
    assert [r.run_id for r in run_logger.get_runs()] == ["r2", "r1", "r0"]
    assert [r.run_id for r in run_logger.get_runs(strategy="hedra", limit=1)] == ["r2"]


def test_missing_run_raises(run_logger):
    with pytest.raises(FileNotFoundError):
        run_logger.get_run("nope")


def test_echo_summary_goes_to_stderr(isolated_home, capsys):
    RunLogger(echo=True).log_run("e", {}, {"completed": 1, "makespan_ms": 2.0}, datetime.now(UTC))
    err = capsys.readouterr().err
    assert "Run: e" in err and "makespan_ms" in err


def test_tracer_writes_json_lines(tmp_path):
    tracer = RunTracer()
    tracer.record(0.0, "generation", None, None, "step", 2.0, batch=3)
    tracer.record(1.0, "scheduler", 4, 0, "arrive")
    tracer.record(2.0, "generation", None, None, "step", 1.5, batch=1)
    tracer.record(2.5, "retrieval", None, None, "substage", 0.5)
    path = tracer.write_jsonl(tmp_path / "nested" / "t.jsonl")
    events = read_trace(path)
    assert len(events) == len(tracer) == 4
    assert events[0].detail == {"batch": 3}
    assert events[1].request_id == 4
    assert busy_time_by_worker(events) == {"generation": 3.5, "retrieval": 0.5}
    assert list(trace_frame(events)["event"]) == ["step", "arrive", "step", "substage"]


def test_empty_trace_has_no_busy_time():
    assert busy_time_by_worker([]) == {}
    assert trace_frame([]).empty
