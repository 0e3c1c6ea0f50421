"""
Clocks used by the engine, the mock backend and the bench harness.

MonotonicClock is wall time. VirtualClock only moves when someone sleeps or
advances it, firing callbacks scheduled with call_at() in time order, which
lets continuous mode run deterministically without real waiting.
"""

import heapq
import itertools
import threading
import time
from typing import Callable, Protocol


class Clock(Protocol):
    def monotonic(self) -> float: ...

    def sleep(self, seconds: float) -> None: ...

    def wall_time(self) -> float: ...


class MonotonicClock:
    def monotonic(self) -> float:
        return time.monotonic()

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            time.sleep(seconds)

    def wall_time(self) -> float:
        return time.time()


class VirtualClock:
    """Single-threaded simulated time."""

    def __init__(self, start: float = 0.0, epoch: float = 1_700_000_000.0):
        self._now = start
        self._epoch = epoch
        self._queue: list = []
        self._counter = itertools.count()
        self._lock = threading.RLock()

    def monotonic(self) -> float:
        return self._now

    def wall_time(self) -> float:
        return self._epoch + self._now

    def call_at(self, when: float, callback: Callable[[], None]) -> None:
        with self._lock:
            heapq.heappush(self._queue, (when, next(self._counter), callback))

    def pending(self) -> int:
        return len(self._queue)

    def next_due(self):
        return self._queue[0][0] if self._queue else None

    def advance_to(self, when: float) -> None:
        """Move time forward to `when`, firing due callbacks in order."""
        while True:
            with self._lock:
                if not self._queue or self._queue[0][0] > when:
                    break
                due, _, callback = heapq.heappop(self._queue)
                self._now = max(self._now, due)
            callback()
        self._now = max(self._now, when)

    def sleep(self, seconds: float) -> None:
        self.advance_to(self._now + max(0.0, seconds))
