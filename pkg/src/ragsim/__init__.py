"""
ragsim - a discrete-event simulator for serving RAG workflows with
co-scheduled, fine-grained retrieval and generation
"""

__version__ = "0.1.0"

from .raggraph import RAGraph, load_workflow
from .report import ExperimentReport
from .scheduler import execute_run, run_experiment
from .types import RunConfig, SchedulerConfig, Strategy, WorkloadSpec
from .vector_index import IvfIndex, search

__all__ = [
    "RAGraph", "load_workflow", "ExperimentReport", "execute_run", "run_experiment",
    "RunConfig", "SchedulerConfig", "Strategy", "WorkloadSpec", "IvfIndex", "search",
]
