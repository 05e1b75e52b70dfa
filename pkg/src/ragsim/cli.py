"""
Command-line interface for ragsim
"""
import json
import logging
import sys
from datetime import datetime, UTC
from pathlib import Path
from typing import Optional

import click
import uvicorn

from .bench import calibrate
from .corpus import generate_corpus, read_corpus, write_corpus
from .dashboard import create_dashboard
from .logging import RunLogger, RunTracer
from .raggraph import list_templates, load_workflow
from .replay import ReplayManager
from .report import emit_report, load_report, summarize_trace
from .scheduler import execute_run
from .tiered_cache import solve_memory_budget
from .types import (Clock, GenLatencyModel, RetrievalCostModel, RunConfig, SchedulerConfig, Strategy, WorkloadSpec,
                    seed_override)
from .vector_index import IvfIndex, build_from_corpus
from .workload import RequestTrace, generate_workload, measure_cluster_skew, measure_locality, measure_termination


def _load_spec(config: Optional[str]) -> WorkloadSpec:
    if config:
        return WorkloadSpec.from_toml(config)
    return WorkloadSpec().with_seed_override()


@click.group()
@click.option('--verbose', '-v', is_flag=True, help='Show debug diagnostics')
def cli(verbose: bool):
    """ragsim - simulate RAG serving with co-scheduled retrieval and generation"""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


@cli.command(name='gen-corpus')
@click.option('--config', '-c', type=click.Path(exists=True), help='Workload TOML file')
@click.option('--out', '-o', type=click.Path(), required=True, help='Output HVEC file')
def gen_corpus(config: Optional[str], out: str):
    """Generate the synthetic Gaussian-mixture corpus"""
    try:
        spec = _load_spec(config)
        click.echo(f"🧪 Generating {spec.corpus.n_vectors} vectors (dim {spec.corpus.dim}, {spec.corpus.n_topics} topics)")
        corpus = generate_corpus(spec.corpus)
        write_corpus(Path(out), corpus)
        click.echo(f"📝 Corpus written to: {out}")
    except Exception as e:
        click.echo(f"❌ Error generating corpus: {e}", err=True)
        sys.exit(1)


@cli.command(name='build-index')
@click.argument('corpus_path', type=click.Path(exists=True))
@click.option('--out', '-o', type=click.Path(), required=True, help='Index directory')
@click.option('--clusters', '-k', default=256, help='Number of IVF clusters')
@click.option('--iters', default=20, help='k-means iterations')
@click.option('--seed', default=0, help='k-means seed (HEDRA_SEED overrides)')
def build_index(corpus_path: str, out: str, clusters: int, iters: int, seed: int):
    """Train centroids and build the IVF index"""
    try:
        forced = seed_override()
        seed = forced if forced is not None else seed
        corpus = read_corpus(Path(corpus_path))
        click.echo(f"🔍 Training {clusters} clusters on {len(corpus)} vectors")
        index = build_from_corpus(corpus, clusters, iters, seed)
        index.save(out)
        sizes = index.cluster_sizes()
        click.echo(f"✨ Index written to: {out}")
        click.echo(f"   Cluster sizes: min {sizes.min()}, mean {sizes.mean():.1f}, max {sizes.max()}")
    except Exception as e:
        click.echo(f"❌ Error building index: {e}", err=True)
        sys.exit(1)


@cli.command(name='gen-workload')
@click.option('--config', '-c', type=click.Path(exists=True), help='Workload TOML file')
@click.option('--out', '-o', type=click.Path(), required=True, help='Output trace JSON')
def gen_workload(config: Optional[str], out: str):
    """Generate a request trace over the corpus topics"""
    try:
        spec = _load_spec(config)
        trace = generate_workload(spec)
        trace.save(out)
        mix = {}
        for record in trace.requests:
            mix[record.workflow] = mix.get(record.workflow, 0) + 1
        click.echo(f"📝 {len(trace.requests)} requests written to: {out}")
        click.echo(f"   Workflows: {json.dumps(mix)}")
    except Exception as e:
        click.echo(f"❌ Error generating workload: {e}", err=True)
        sys.exit(1)


@cli.command()
@click.option('--index', 'index_dir', type=click.Path(exists=True), required=True, help='Index directory')
@click.option('--out-dir', '-o', type=click.Path(), required=True, help='Where calibration.json and profile.csv go')
@click.option('--nprobe', default=32, help='Clusters per query for the retrieval table')
@click.option('--total-mem', type=float, help='Device memory in bytes; solves the KV / index cache split')
@click.option('--model-bytes', type=float, default=0.0, help='Model weights in bytes')
@click.option('--no-measure', is_flag=True, help='Skip wallclock measurements and keep the configured cost model')
def bench(index_dir: str, out_dir: str, nprobe: int, total_mem: Optional[float], model_bytes: float, no_measure: bool):
    """Measure cost constants and fit the throughput models"""
    try:
        index = IvfIndex.load(index_dir)
        click.echo(f"⏱️  Calibrating on {index.size} vectors / {index.n_clusters} clusters")
        calibration, profile, measured = calibrate(index, GenLatencyModel(), RetrievalCostModel(), nprobe,
                                                   measure=not no_measure)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "calibration.json").write_text(calibration.model_dump_json(indent=2))
        profile.to_csv(out / "profile.csv")
        for name, value in measured.items():
            click.echo(f"   {name}: {value:.4f}")
        click.echo(f"   generation: T = {calibration.gen.a:.4f}·n + {calibration.gen.b:.6f}·prefill (max {calibration.gen.t_max:.3f})")
        click.echo(f"   retrieval:  T = {calibration.ret.a:.4f}·n (max {calibration.ret.t_max:.3f})")
        if total_mem is not None:
            budget = solve_memory_budget(profile, profile.gen["rps"].max(), profile.ret["rps"].max(), total_mem, model_bytes)
            click.echo(f"   memory split: kv {budget.kv_bytes:.0f} B, cache {budget.cache_bytes:.0f} B ({budget.capacity_gc} clusters)")
        click.echo(f"📝 Calibration written to: {out}")
    except Exception as e:
        click.echo(f"❌ Error running bench: {e}", err=True)
        sys.exit(1)


@cli.command()
@click.option('--index', 'index_dir', type=click.Path(exists=True), required=True, help='Index directory')
@click.option('--trace', 'trace_path', type=click.Path(exists=True), required=True, help='Request trace JSON')
@click.option('--config', '-c', type=click.Path(exists=True), help='RunConfig JSON; flags below override it')
@click.option('--strategy', type=click.Choice([s.value for s in Strategy]), help='Pipeline strategy')
@click.option('--clock', type=click.Choice([c.value for c in Clock]), help='Time source')
@click.option('--workflow', help='Template name or workflow file forced on every request')
@click.option('--calibration', type=click.Path(exists=True), help='Calibration JSON from bench')
@click.option('--nprobe', type=int, help='Clusters per retrieval')
@click.option('--mb', type=float, help='Fixed sub-stage budget in ms')
@click.option('--topk', type=int, help='Documents per retrieval, overriding the workflow nodes')
@click.option('--beta-ms', 'beta_ms', type=float, help='Scheduling overhead per sub-stage in ms')
@click.option('--tau', type=float, help='Speculation trigger threshold')
@click.option('--slo-ms', 'slo_ms', type=float, help='Per-request latency bound in ms')
@click.option('--speculation', type=click.Choice(['on', 'off']), help='Speculative generation and retrieval')
@click.option('--cache', 'cache_mode', type=click.Choice(['on', 'off']), help='Fast-tier index cache')
@click.option('--approx', is_flag=True, help='Enable early termination')
@click.option('--streak', type=int, help='Unchanged clusters before early termination')
@click.option('--seed', type=int, help='Run seed')
@click.option('--report', '-o', 'report_out', type=click.Path(), help='Report JSON (trace written next to it)')
def run(index_dir: str, trace_path: str, config: Optional[str], strategy: Optional[str], clock: Optional[str],
        workflow: Optional[str], calibration: Optional[str], nprobe: Optional[int], mb: Optional[float],
        topk: Optional[int], beta_ms: Optional[float], tau: Optional[float], slo_ms: Optional[float],
        speculation: Optional[str], cache_mode: Optional[str], approx: bool, streak: Optional[int],
        seed: Optional[int], report_out: Optional[str]):
    """Serve a request trace and report latency, throughput and speculation metrics"""
    logger = RunLogger()
    run_id = logger.generate_run_id()
    started = datetime.now(UTC)
    run_config = None
    try:
        base = json.loads(Path(config).read_text()) if config else {}
        base.update({"index_dir": index_dir, "trace_path": trace_path})
        if workflow is not None:
            base["workflow"] = workflow
        if calibration is not None:
            base["calibration_path"] = calibration
        run_config = RunConfig.model_validate(base)

        overrides = {
            "strategy": strategy, "clock": clock, "nprobe": nprobe, "topk": topk, "mb_override": mb,
            "beta_ms": beta_ms, "tau": tau, "slo_ms": slo_ms, "termination_streak": streak, "seed": seed,
        }
        updates = {k: v for k, v in overrides.items() if v is not None}
        if speculation is not None:
            updates["speculation"] = speculation == "on"
        if approx:
            updates["approx"] = True
        scheduler = SchedulerConfig.model_validate({**run_config.scheduler.model_dump(), **updates})
        cache = run_config.cache
        if cache_mode is not None:
            cache = cache.model_copy(update={"enabled": cache_mode == "on"})
        run_config = run_config.model_copy(update={"scheduler": scheduler, "cache": cache}).with_seed_override()

        click.echo(f"🚀 Running {scheduler.strategy.value} on the {scheduler.clock.value} clock")
        tracer = RunTracer()
        report = execute_run(run_config, tracer)
        report_path = Path(report_out) if report_out else logger.storage_path / f"{run_id}.json"
        report_path, trace_file = emit_report(report, report_path, tracer)
        logger.log_run(run_id, run_config.model_dump(mode="json"), report.model_dump(mode="json"), started,
                       report_path=str(report_path), trace_path=str(trace_file))

        click.echo("\n📊 Results:")
        for key, value in report.headline().items():
            click.echo(f"   {key}: {value}")
        click.echo(f"\n📝 Report written to: {report_path}")
        click.echo(f"   Run ID: {click.style(run_id, fg='green', bold=True)}")
    except Exception as e:
        config_dump = run_config.model_dump(mode="json") if run_config is not None else {}
        logger.log_run(run_id, config_dump, None, started, error=str(e))
        click.echo(f"❌ Error running experiment: {e}", err=True)
        sys.exit(1)


@cli.command()
@click.argument('path', type=click.Path(exists=True))
def report(path: str):
    """Summarize a report JSON or an event trace (.jsonl)"""
    try:
        if path.endswith(".jsonl"):
            click.echo(json.dumps(summarize_trace(path), indent=2))
        else:
            click.echo(json.dumps(load_report(path).headline(), indent=2))
    except Exception as e:
        click.echo(f"❌ Error reading {path}: {e}", err=True)
        sys.exit(1)


@cli.command()
@click.option('--index', 'index_dir', type=click.Path(exists=True), required=True, help='Index directory')
@click.option('--trace', 'trace_path', type=click.Path(exists=True), required=True, help='Request trace JSON')
@click.option('--nprobe', default=32, help='Clusters per query')
@click.option('--k', default=10, help='Results per query')
@click.option('--k-cache', default=20, help='Extended top-k depth')
@click.option('--streak', default=4, help='Early-termination streak')
def measure(index_dir: str, trace_path: str, nprobe: int, k: int, k_cache: int, streak: int):
    """Measure cluster skew, locality and early termination on a trace"""
    try:
        index = IvfIndex.load(index_dir)
        trace = RequestTrace.load(trace_path)
        results = {
            "top20_access_share": measure_cluster_skew(index, trace, nprobe),
            "locality": measure_locality(index, trace, k, k_cache, nprobe),
            "termination": measure_termination(index, trace, k, nprobe, streak, k_cache),
        }
        click.echo(json.dumps(results, indent=2))
    except Exception as e:
        click.echo(f"❌ Error measuring trace: {e}", err=True)
        sys.exit(1)


@cli.command()
@click.argument('name_or_path', required=False)
def workflows(name_or_path: Optional[str]):
    """List the shipped templates, or validate one workflow"""
    try:
        if name_or_path is None:
            click.echo("📋 Templates:")
            for name in list_templates():
                click.echo(f"  • {name}")
            return
        graph = load_workflow(name_or_path)
        problems = graph.validate()
        if problems:
            click.echo(f"⚠️  {graph.name} has {len(problems)} problem(s):")
            for problem in problems:
                click.echo(f"  • {problem}")
            sys.exit(1)
        click.echo(f"✅ {graph.name}: {len(graph.nodes)} nodes, {len(graph.edges)} edges")
    except SystemExit:
        raise
    except Exception as e:
        click.echo(f"❌ Error loading workflow: {e}", err=True)
        sys.exit(1)


@cli.command()
@click.option('--strategy', help='Filter runs by strategy')
@click.option('--limit', default=10, help='Number of runs to show')
@click.option('--follow', '-f', is_flag=True, help='Follow new runs in real-time')
@click.option('--format', type=click.Choice(['text', 'json']), default='text', help='Output format')
def logs(strategy: Optional[str], limit: int, follow: bool, format: str):
    """View logged runs"""
    try:
        logger = RunLogger(echo=False)
        if follow:
            click.echo("Watching for new runs... (Ctrl+C to exit)")
            try:
                for log in logger.watch_runs(strategy=strategy):
                    _display_log(log, format)
            except KeyboardInterrupt:
                click.echo("\nStopped watching runs")
            return

        runs = logger.get_runs(strategy=strategy, limit=limit)
        if not runs:
            click.echo(f"No runs found for strategy '{strategy}'" if strategy else "No runs found. Try `ragsim run` first!")
            return
        for log in runs:
            _display_log(log, format)
    except Exception as e:
        click.echo(f"Error viewing logs: {e}", err=True)
        sys.exit(1)


def _display_log(log, format='text'):
    if format == 'json':
        click.echo(json.dumps(log.to_dict(), indent=2))
        return
    status = "✓" if not log.error else "✗"
    click.echo(f"\n🔍 Run ID: {click.style(log.run_id, fg='green', bold=True)}")
    click.echo(f"   [{log.timestamp}] {status} {log.strategy}/{log.clock} {log.workflow or ''} ({log.duration_ms:.0f}ms)")
    if log.report:
        click.echo(f"   makespan {log.report.get('makespan_ms', 0):.2f} ms, "
                   f"p99 {log.report.get('latency_p99_ms', 0):.2f} ms, "
                   f"completed {log.report.get('completed', 0)}/{log.report.get('n_requests', 0)}")
    if log.error:
        click.echo(f"   Error: {log.error}", err=True)
    click.echo("─" * 80)


@cli.command()
@click.argument('run_id')
def replay(run_id: str):
    """Re-execute a logged run and check that it reproduces"""
    try:
        result = ReplayManager().replay_run(run_id)
        click.echo(f"🔄 Replaying run: {run_id}")
        if not result["comparable"]:
            click.echo("⚠️  Original run used the live clock; only virtual runs reproduce exactly")
        if result["match"]:
            click.echo("✅ Replay matches the original report")
        else:
            click.echo(f"⚠️  Reports differ in: {', '.join(result['differences'])}")
            sys.exit(2)
    except SystemExit:
        raise
    except Exception as e:
        click.echo(f"❌ Error replaying run: {e}", err=True)
        sys.exit(1)


@cli.command()
@click.option('--host', default="127.0.0.1", help="Host to bind to")
@click.option('--port', default=8001, help="Port to bind to")
def dashboard(host: str, port: int):
    """Start the web dashboard for logged runs"""
    try:
        click.echo(f"🚀 Starting dashboard at http://{host}:{port}")
        click.echo("\n📊 Available views:")
        click.echo("  • /                        (Run list)")
        click.echo("  • /api/runs                (Runs as JSON)")
        click.echo("  • /api/runs/<id>/trace     (Event trace)")
        uvicorn.run(create_dashboard(), host=host, port=port)
    except Exception as e:
        click.echo(f"\n❌ Error starting dashboard: {e}", err=True)
        sys.exit(1)


if __name__ == '__main__':
    cli()
