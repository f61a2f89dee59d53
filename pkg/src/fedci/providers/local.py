"""In-process worker pool: the execution provider for sites where the agent
host itself runs the tasks."""

from __future__ import annotations

import logging
import queue
import threading
from typing import Callable

log = logging.getLogger(__name__)


class LocalWorkerPool:
    """Fixed-size pool of worker threads pulling from one queue.

    Workers notice shutdown within one poll interval. The handler owns all
    error handling; an exception escaping it is logged and the worker moves
    on to the next item.
    """

    def __init__(
        self,
        size: int,
        handler: Callable[[object], None],
        *,
        poll_interval: float = 0.1,
        name_prefix: str = "worker",
    ):
        if size < 1:
            raise ValueError("pool size must be at least 1")
        self._handler = handler
        self._poll_interval = poll_interval
        self._queue: queue.Queue = queue.Queue()
        self._stop = threading.Event()
        self._threads = [
            threading.Thread(target=self._loop, name=f"{name_prefix}-{i}", daemon=True)
            for i in range(size)
        ]
        for thread in self._threads:
            thread.start()

    def submit(self, item: object) -> None:
        if self._stop.is_set():
            raise RuntimeError("pool is shut down")
        self._queue.put(item)

    def pending(self) -> int:
        return self._queue.qsize()

    def _loop(self) -> None:
        while not self._stop.is_set():
            try:
                item = self._queue.get(timeout=self._poll_interval)
            except queue.Empty:
                continue
            try:
                self._handler(item)
            except Exception:
                log.exception("task handler failed")

    def shutdown(self, *, wait: bool = True) -> None:
        self._stop.set()
        if wait:
            for thread in self._threads:
                thread.join(timeout=self._poll_interval * 50)

    def alive_count(self) -> int:
        return sum(1 for t in self._threads if t.is_alive())
