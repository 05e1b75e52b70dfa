from dataclasses import dataclass, field
from datetime import datetime, UTC
from typing import Any, Dict, Optional, List, Iterator, Union
import uuid
import json
from pathlib import Path
import threading
import time
import sqlite3
import os
import sys

import pandas as pd

HOME_ENV_VAR = "RAGSIM_HOME"


def default_storage_path() -> Path:
    """~/.ragsim/runs unless RAGSIM_HOME points elsewhere"""
    home = os.environ.get(HOME_ENV_VAR)
    base = Path(home) if home else Path(os.path.expanduser("~/.ragsim"))
    return base / "runs"


@dataclass
class RunLog:
    run_id: str
    timestamp: datetime
    strategy: str
    clock: str
    workflow: Optional[str]
    config: Dict[str, Any]
    report: Optional[Dict[str, Any]]
    error: Optional[str]
    duration_ms: float
    report_path: Optional[str] = None
    trace_path: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            'run_id': self.run_id,
            'timestamp': self.timestamp.isoformat(),
            'strategy': self.strategy,
            'clock': self.clock,
            'workflow': self.workflow,
            'config': self.config,
            'report': self.report,
            'error': self.error,
            'duration_ms': self.duration_ms,
            'report_path': self.report_path,
            'trace_path': self.trace_path,
        }


class RunLogger:
    """Experiment runs recorded in a local sqlite database"""

    def __init__(self, storage_path: Optional[Union[str, Path]] = None, echo: bool = True):
        self.storage_path = Path(storage_path or default_storage_path()).absolute()
        self.storage_path.mkdir(parents=True, exist_ok=True)
        self.db_path = self.storage_path / "runs.db"
        self.echo = echo
        self._init_db()

    def _init_db(self):
        try:
            with sqlite3.connect(str(self.db_path)) as conn:
                conn.execute("""
                    CREATE TABLE IF NOT EXISTS runs (
                        run_id TEXT PRIMARY KEY,
                        timestamp TEXT NOT NULL,
                        strategy TEXT NOT NULL,
                        clock TEXT NOT NULL,
                        workflow TEXT,
                        config TEXT NOT NULL,
                        report TEXT,
                        error TEXT,
                        duration_ms REAL NOT NULL,
                        report_path TEXT,
                        trace_path TEXT,
                        created_at DATETIME DEFAULT CURRENT_TIMESTAMP
                    )
                """)
                conn.execute("""
                    CREATE INDEX IF NOT EXISTS idx_runs_timestamp
                    ON runs(timestamp DESC)
                """)
        except sqlite3.OperationalError as e:
            raise RuntimeError(f"Failed to initialize database at {self.db_path}: {e}")

    def generate_run_id(self) -> str:
        return str(uuid.uuid4())

    def log_run(
        self,
        run_id: str,
        config: Dict[str, Any],
        report: Optional[Dict[str, Any]],
        start_time: datetime,
        error: Optional[str] = None,
        report_path: Optional[str] = None,
        trace_path: Optional[str] = None,
    ) -> RunLog:
        """Persist one run (config is a dumped RunConfig) and echo a short summary to stderr"""
        duration = (datetime.now(UTC) - start_time).total_seconds() * 1000
        scheduler = config.get('scheduler', {})
        entry = RunLog(
            run_id=run_id,
            timestamp=start_time,
            strategy=str(scheduler.get('strategy', 'hedra')),
            clock=str(scheduler.get('clock', 'virtual')),
            workflow=config.get('workflow'),
            config=config,
            report=report,
            error=error,
            duration_ms=duration,
            report_path=report_path,
            trace_path=trace_path,
        )
        try:
            with sqlite3.connect(str(self.db_path)) as conn:
                conn.execute("""
                    INSERT OR REPLACE INTO runs (
                        run_id, timestamp, strategy, clock, workflow, config,
                        report, error, duration_ms, report_path, trace_path
                    ) VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?)
                """, (
                    run_id,
                    start_time.isoformat(),
                    entry.strategy,
                    entry.clock,
                    entry.workflow,
                    json.dumps(config),
                    json.dumps(report) if report else None,
                    error,
                    duration,
                    report_path,
                    trace_path,
                ))
                conn.commit()
        except sqlite3.Error as e:
            print(f"Error saving to database: {e}", file=sys.stderr)

        if self.echo:
            status = "✅" if not error else "❌"
            print(f"\n{entry.strategy} / {entry.clock}  {status}  ({duration:.0f}ms)", file=sys.stderr)
            print(f"Run: {run_id}", file=sys.stderr)
            if error:
                print(f"Error: {error}", file=sys.stderr)
            elif report:
                headline = {k: report.get(k) for k in ('completed', 'failed', 'makespan_ms', 'latency_p50_ms', 'latency_p99_ms')}
                print(f"Summary: {json.dumps(headline, indent=2)}", file=sys.stderr)
        return entry

    def _row_to_log(self, row: sqlite3.Row) -> RunLog:
        return RunLog(
            run_id=row['run_id'],
            timestamp=datetime.fromisoformat(row['timestamp']),
            strategy=row['strategy'],
            clock=row['clock'],
            workflow=row['workflow'],
            config=json.loads(row['config']),
            report=json.loads(row['report']) if row['report'] else None,
            error=row['error'],
            duration_ms=row['duration_ms'],
            report_path=row['report_path'],
            trace_path=row['trace_path'],
        )

    def get_run(self, run_id: str) -> RunLog:
        with sqlite3.connect(str(self.db_path)) as conn:
            conn.row_factory = sqlite3.Row
            row = conn.execute("SELECT * FROM runs WHERE run_id = ?", (run_id,)).fetchone()
        if row is None:
            raise FileNotFoundError(f"Run ID {run_id} not found in logs")
        return self._row_to_log(row)

    def get_runs(self, strategy: Optional[str] = None, limit: int = 10) -> List[RunLog]:
        """Most recent runs first, optionally filtered by strategy"""
        with sqlite3.connect(str(self.db_path)) as conn:
            conn.row_factory = sqlite3.Row
            query = "SELECT * FROM runs"
            params: List[Any] = []
            if strategy:
                query += " WHERE strategy = ?"
                params.append(strategy)
            query += " ORDER BY timestamp DESC LIMIT ?"
            params.append(limit)
            rows = conn.execute(query, params).fetchall()
        return [self._row_to_log(row) for row in rows]

    def watch_runs(self, strategy: Optional[str] = None, poll_s: float = 1.0) -> Iterator[RunLog]:
        """Yield runs as they are logged"""
        with sqlite3.connect(str(self.db_path)) as conn:
            row = conn.execute("SELECT MAX(timestamp) FROM runs").fetchone()
            last_timestamp = row[0] or '1970-01-01T00:00:00'

        while True:
            try:
                with sqlite3.connect(str(self.db_path)) as conn:
                    conn.row_factory = sqlite3.Row
                    query = "SELECT * FROM runs WHERE timestamp > ?"
                    params: List[Any] = [last_timestamp]
                    if strategy:
                        query += " AND strategy = ?"
                        params.append(strategy)
                    query += " ORDER BY timestamp ASC"
                    for row in conn.execute(query, params).fetchall():
                        last_timestamp = row['timestamp']
                        yield self._row_to_log(row)
                time.sleep(poll_s)
            except sqlite3.Error as e:
                print(f"Error watching logs: {e}", file=sys.stderr)
                time.sleep(poll_s)



@dataclass
class TraceEvent:
    time_ms: float
    worker: str
    request_id: Optional[int]
    subnode_id: Optional[int]
    event: str
    duration_ms: float = 0.0
    detail: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'time_ms': self.time_ms,
            'worker': self.worker,
            'request_id': self.request_id,
            'subnode_id': self.subnode_id,
            'event': self.event,
            'duration_ms': self.duration_ms,
            'detail': self.detail,
        }


class RunTracer:
    """In-memory execution trace of one run, written out as JSON lines"""

    def __init__(self):
        self._events: List[TraceEvent] = []
        self._lock = threading.Lock()

    def record(self, time_ms: float, worker: str, request_id: Optional[int], subnode_id: Optional[int],
               event: str, duration_ms: float = 0.0, **detail: Any) -> None:
        with self._lock:
            self._events.append(TraceEvent(time_ms, worker, request_id, subnode_id, event, duration_ms, detail))

    @property
    def events(self) -> List[TraceEvent]:
        with self._lock:
            return list(self._events)

    def __len__(self) -> int:
        return len(self._events)

    def write_jsonl(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w") as f:
            for event in self.events:
                f.write(json.dumps(event.to_dict()) + "\n")
        return path


def read_trace(path: Union[str, Path]) -> List[TraceEvent]:
    events = []
    with Path(path).open() as f:
        for line in f:
            if line.strip():
                events.append(TraceEvent(**json.loads(line)))
    return events


def trace_frame(events: List[TraceEvent]) -> pd.DataFrame:
    columns = ['time_ms', 'worker', 'request_id', 'subnode_id', 'event', 'duration_ms']
    return pd.DataFrame([{c: getattr(e, c) for c in columns} for e in events], columns=columns)


def busy_time_by_worker(events: List[TraceEvent]) -> Dict[str, float]:
    """Total step time of each worker"""
    frame = trace_frame(events)
    if frame.empty:
        return {}
    steps = frame[frame['duration_ms'] > 0]
    return {str(k): float(v) for k, v in steps.groupby('worker')['duration_ms'].sum().items()}
