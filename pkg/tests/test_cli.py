import json

import pytest
from click.testing import CliRunner

import ragsim.cli as cli_module
from ragsim.cli import cli
from ragsim.logging import RunLogger
from ragsim.report import load_report

WORKLOAD_TOML = """
[corpus]
n_vectors = 600
dim = 8
n_topics = 12
n_clusters = 12
seed = 1

[queries]
prompt_tokens = 4
max_rounds = 2
seed = 3

[queries.arrival]
kind = "fixed"
offsets_ms = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0]

[queries.workflow_mix]
oneshot = 0.5
hyde = 0.5

[queries.tokens_per_stage]
mean = 6.0
std = 1.0
min = 2
max = 10
"""


@pytest.fixture
def artifacts(tmp_path):
    """Corpus, index and trace built through the CLI"""
    runner = CliRunner()
    config = tmp_path / "workload.toml"
    config.write_text(WORKLOAD_TOML)
    corpus = tmp_path / "corpus.hvec"
    index = tmp_path / "index"
    trace = tmp_path / "trace.json"

    result = runner.invoke(cli, ["gen-corpus", "-c", str(config), "-o", str(corpus)])
    assert result.exit_code == 0, result.output
    assert "600 vectors" in result.output

    result = runner.invoke(cli, ["build-index", str(corpus), "-o", str(index), "--clusters", "12", "--iters", "5"])
    assert result.exit_code == 0, result.output
    assert "Index written" in result.output

    result = runner.invoke(cli, ["gen-workload", "-c", str(config), "-o", str(trace)])
    assert result.exit_code == 0, result.output
    assert "6 requests" in result.output
    return {"tmp": tmp_path, "index": index, "trace": trace}


def _run(artifacts, *extra):
    out = artifacts["tmp"] / "out" / "report.json"
    args = ["run", "--index", str(artifacts["index"]), "--trace", str(artifacts["trace"]),
            "--nprobe", "4", "--report", str(out), *extra]
    return CliRunner().invoke(cli, args), out


def test_run_writes_and_logs_a_report(artifacts):
    result, out = _run(artifacts, "--strategy", "hedra", "--seed", "4")
    assert result.exit_code == 0, result.output
    assert "Results" in result.output
    report = load_report(out)
    assert report.completed == 6
    assert report.seed == 4
    assert out.with_suffix(".trace.jsonl").is_file()

    (logged,) = RunLogger(echo=False).get_runs()
    assert logged.strategy == "hedra"
    assert logged.config["scheduler"]["nprobe"] == 4


def test_seed_environment_variable_wins(artifacts, monkeypatch):
    monkeypatch.setenv("HEDRA_SEED", "11")
    result, out = _run(artifacts, "--seed", "4")
    assert result.exit_code == 0, result.output
    assert load_report(out).seed == 11


def test_run_config_file_and_flags(artifacts):
    config = artifacts["tmp"] / "run.json"
    config.write_text(json.dumps({"index_dir": "ignored", "trace_path": "ignored",
                                  "scheduler": {"strategy": "coarse", "beta_ms": 0.5}}))
    result, out = _run(artifacts, "-c", str(config), "--beta-ms", "0.25", "--cache", "off")
    assert result.exit_code == 0, result.output
    report = load_report(out)
    assert report.strategy == "coarse"
    assert not report.cache.enabled
    logged = RunLogger(echo=False).get_runs()[0]
    assert logged.config["scheduler"]["beta_ms"] == 0.25
    assert logged.config["index_dir"] == str(artifacts["index"])


def test_run_flags_reach_the_scheduler(artifacts):
    result, out = _run(artifacts, "--strategy", "hedra", "--topk", "3", "--slo-ms", "50",
                       "--speculation", "off", "--cache", "on")
    assert result.exit_code == 0, result.output
    report = load_report(out)
    assert report.completed == 6
    retrieved = [value["doc_ids"] for bindings in report.bindings().values()
                 for value in bindings.values() if value["doc_ids"] is not None]
    assert retrieved and all(len(ids) == 3 for ids in retrieved)
    assert report.speculation.gen_launched == 0 and report.speculation.ret_launched == 0
    assert report.cache.enabled

    scheduler = RunLogger(echo=False).get_runs()[0].config["scheduler"]
    assert scheduler["topk"] == 3 and scheduler["slo_ms"] == 50.0
    assert scheduler["speculation"] is False


def test_run_rejects_unknown_switch_values(artifacts):
    result, _ = _run(artifacts, "--speculation", "maybe")
    assert result.exit_code == 2
    result = CliRunner().invoke(cli, ["run", "--help"])
    for flag in ("--topk", "--beta-ms", "--slo-ms", "--speculation", "--cache", "--report"):
        assert flag in result.output


def test_failed_run_is_logged(artifacts):
    result, _ = _run(artifacts, "--workflow", "irg")
    # oneshot and hyde requests carry too few scripts for irg, so they fail without aborting the run
    assert result.exit_code == 0, result.output

    result, _ = _run(artifacts, "--workflow", "no-such-template")
    assert result.exit_code == 1
    failed = [r for r in RunLogger(echo=False).get_runs() if r.error]
    assert len(failed) == 1 and failed[0].report is None


def test_replay_report_and_logs(artifacts):
    result, out = _run(artifacts)
    assert result.exit_code == 0, result.output
    run_id = RunLogger(echo=False).get_runs()[0].run_id
    runner = CliRunner()

    result = runner.invoke(cli, ["replay", run_id])
    assert result.exit_code == 0, result.output
    assert "matches" in result.output

    result = runner.invoke(cli, ["report", str(out)])
    assert result.exit_code == 0, result.output
    assert json.loads(result.stdout)["completed"] == 6

    result = runner.invoke(cli, ["report", str(out.with_suffix(".trace.jsonl"))])
    assert result.exit_code == 0, result.output
    assert json.loads(result.stdout)["event_counts"]["arrive"] == 6

    result = runner.invoke(cli, ["logs", "--format", "json", "--limit", "1"])
    assert result.exit_code == 0, result.output
    assert run_id in result.output

    result = runner.invoke(cli, ["logs", "--strategy", "coarse"])
    assert "No runs found" in result.output


def test_replay_of_unknown_run_fails():
    result = CliRunner().invoke(cli, ["replay", "missing"])
    assert result.exit_code == 1


def test_bench_writes_calibration(artifacts):
    out = artifacts["tmp"] / "cal"
    result = CliRunner().invoke(cli, ["bench", "--index", str(artifacts["index"]), "-o", str(out), "--nprobe", "4",
                                      "--no-measure", "--total-mem", str(10 * 2**30), "--model-bytes", str(2**30)])
    assert result.exit_code == 0, result.output
    assert "memory split" in result.output
    assert (out / "calibration.json").is_file() and (out / "profile.csv").is_file()

    result, report_path = _run(artifacts, "--calibration", str(out / "calibration.json"))
    assert result.exit_code == 0, result.output
    assert load_report(report_path).completed == 6


def test_bench_budget_uses_each_table_at_its_own_load(artifacts, monkeypatch):
    real_calibrate, real_solve = cli_module.calibrate, cli_module.solve_memory_budget
    calls = []

    def calibrate(*args, **kwargs):
        calibration, profile, measured = real_calibrate(*args, **kwargs)
        profile.gen = profile.gen.assign(rps=profile.gen["rps"] * 10)
        return calibration, profile, measured

    def solve(profile, rps_gen, rps_ret, *args):
        calls.append((rps_gen, rps_ret, profile.gen["rps"].max(), profile.ret["rps"].max()))
        return real_solve(profile, rps_gen, rps_ret, *args)

    monkeypatch.setattr(cli_module, "calibrate", calibrate)
    monkeypatch.setattr(cli_module, "solve_memory_budget", solve)
    result = CliRunner().invoke(cli, ["bench", "--index", str(artifacts["index"]), "-o", str(artifacts["tmp"] / "cal"),
                                      "--nprobe", "4", "--no-measure", "--total-mem", str(10 * 2**30),
                                      "--model-bytes", str(2**30)])
    assert result.exit_code == 0, result.output
    ((rps_gen, rps_ret, gen_max, ret_max),) = calls
    assert rps_gen == gen_max and rps_ret == ret_max
    assert rps_gen != rps_ret


def test_measure_prints_all_three_measurements(artifacts):
    result = CliRunner().invoke(cli, ["measure", "--index", str(artifacts["index"]), "--trace", str(artifacts["trace"]),
                                      "--nprobe", "4", "--k", "5", "--k-cache", "8"])
    assert result.exit_code == 0, result.output
    data = json.loads(result.stdout)
    assert {"top20_access_share", "locality", "termination"} <= set(data)


def test_workflows_listing_and_validation(tmp_path):
    runner = CliRunner()
    result = runner.invoke(cli, ["workflows"])
    assert result.exit_code == 0
    for name in ("oneshot", "hyde", "recomp", "multistep", "irg"):
        assert name in result.output

    result = runner.invoke(cli, ["workflows", "multistep"])
    assert result.exit_code == 0
    assert "3 nodes" in result.output

    broken = tmp_path / "broken.json"
    broken.write_text(json.dumps({"name": "broken", "nodes": [], "edges": [{"from": "START", "to": 5}]}))
    assert runner.invoke(cli, ["workflows", str(broken)]).exit_code == 1
