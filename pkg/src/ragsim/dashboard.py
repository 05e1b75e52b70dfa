from pathlib import Path
from typing import Optional

from fastapi import FastAPI, HTTPException, Query
from fastapi.responses import HTMLResponse

from .logging import RunLogger, read_trace

_HOME = """<!doctype html>
<html>
<head><meta charset="utf-8"><title>ragsim runs</title></head>
<body>
<h1>ragsim runs</h1>
<table id="runs" border="1" cellpadding="4">
<tr><th>run</th><th>time</th><th>strategy</th><th>clock</th><th>workflow</th><th>makespan ms</th><th>p99 ms</th><th>error</th></tr>
</table>
<script>
fetch("/api/runs").then(r => r.json()).then(runs => {
  const table = document.getElementById("runs");
  for (const run of runs) {
    const report = run.report || {};
    const row = table.insertRow();
    for (const cell of [run.run_id.slice(0, 8), run.timestamp, run.strategy, run.clock, run.workflow || "",
                        report.makespan_ms ?? "", report.latency_p99_ms ?? "", run.error || ""]) {
      row.insertCell().textContent = cell;
    }
  }
});
</script>
</body>
</html>
"""


def create_dashboard(logger: Optional[RunLogger] = None) -> FastAPI:
    """Create and configure the run viewer FastAPI application"""
    dashboard = FastAPI(title="ragsim dashboard")
    logger = logger or RunLogger(echo=False)

    @dashboard.get("/api/runs")
    async def get_runs(
        strategy: Optional[str] = None,
        status: Optional[str] = None,
        limit: int = Query(default=50, le=100),
    ):
        """Recent runs, newest first"""
        runs = logger.get_runs(strategy=strategy, limit=limit)
        if status == "success":
            runs = [run for run in runs if not run.error]
        elif status == "error":
            runs = [run for run in runs if run.error]
        return [run.to_dict() for run in runs]

    @dashboard.get("/api/runs/{run_id}")
    async def get_run(run_id: str):
        try:
            return logger.get_run(run_id).to_dict()
        except FileNotFoundError as e:
            raise HTTPException(status_code=404, detail=str(e))

    @dashboard.get("/api/runs/{run_id}/trace")
    async def get_trace(run_id: str, limit: int = Query(default=1000, le=100_000)):
        try:
            run = logger.get_run(run_id)
        except FileNotFoundError as e:
            raise HTTPException(status_code=404, detail=str(e))
        if not run.trace_path or not Path(run.trace_path).is_file():
            raise HTTPException(status_code=404, detail=f"Run {run_id} has no trace file")
        return [event.to_dict() for event in read_trace(run.trace_path)[:limit]]

    @dashboard.get("/", response_class=HTMLResponse)
    async def home():
        return _HOME

    return dashboard
