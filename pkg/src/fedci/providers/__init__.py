"""Execution providers: local worker pools, a batch pilot-job provider, and
a simulated batch scheduler for desk-scale testing."""

from .batch import BatchCommands, BatchProvider, PilotJob
from .local import LocalWorkerPool
from .simsched import FileSimScheduler, SimScheduler

__all__ = [
    "BatchCommands",
    "BatchProvider",
    "FileSimScheduler",
    "LocalWorkerPool",
    "PilotJob",
    "SimScheduler",
]
