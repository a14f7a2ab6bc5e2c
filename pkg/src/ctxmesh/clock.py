"""Clock abstraction: simulated time for the harness, wall time for serving.

Every timer in the system (throttle windows, registration expiry, retry
backoff, heartbeats) goes through this interface, so a scenario run under
:class:`SimClock` is a pure function of its script.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import threading
import time
from typing import Callable, Protocol

log = logging.getLogger("ctxmesh.clock")


class TimerHandle:
    __slots__ = ("_cancelled",)

    def __init__(self):
        self._cancelled = False

    def cancel(self):
        self._cancelled = True

    @property
    def cancelled(self) -> bool:
        return self._cancelled


class Clock(Protocol):
    def now_ms(self) -> int: ...

    def call_at(self, when_ms: int, fn: Callable[[], None]) -> TimerHandle: ...


class SimClock:
    """Deterministic logical clock. Timers fire in (time, insertion) order."""

    def __init__(self, start_ms: int = 0):
        self._now = start_ms
        self._heap: list[tuple[int, int, TimerHandle, Callable[[], None]]] = []
        self._seq = itertools.count()

    def now_ms(self) -> int:
        return self._now

    def call_at(self, when_ms: int, fn: Callable[[], None]) -> TimerHandle:
        handle = TimerHandle()
        heapq.heappush(self._heap, (max(int(when_ms), self._now), next(self._seq), handle, fn))
        return handle

    def call_later(self, delay_ms: int, fn: Callable[[], None]) -> TimerHandle:
        return self.call_at(self._now + delay_ms, fn)

    def _run(self, fn: Callable[[], None]):
        try:
            fn()
        except Exception:  # timers must never kill the loop
            log.exception("timer callback failed at t=%d", self._now)

    def drain(self):
        """Fire every timer due at or before the current time."""
        while self._heap and self._heap[0][0] <= self._now:
            _, _, handle, fn = heapq.heappop(self._heap)
            if not handle.cancelled:
                self._run(fn)

    def advance_to(self, when_ms: int):
        """Move time forward, firing intervening timers at their due times."""
        if when_ms < self._now:
            raise ValueError(f"clock cannot go backwards ({when_ms} < {self._now})")
        while self._heap and self._heap[0][0] <= when_ms:
            due, _, handle, fn = heapq.heappop(self._heap)
            self._now = max(self._now, due)
            if not handle.cancelled:
                self._run(fn)
        self._now = when_ms

    def advance_by(self, delta_ms: int):
        self.advance_to(self._now + delta_ms)

    @property
    def pending(self) -> int:
        return sum(1 for _, _, h, _ in self._heap if not h.cancelled)


class SystemClock:
    """Wall clock (epoch milliseconds) with a scheduler thread for timers."""

    def __init__(self):
        self._heap: list[tuple[int, int, TimerHandle, Callable[[], None]]] = []
        self._seq = itertools.count()
        self._cond = threading.Condition()
        self._stopped = False
        self._thread = threading.Thread(target=self._loop, name="ctxmesh-timers", daemon=True)
        self._thread.start()

    def now_ms(self) -> int:
        return int(time.time() * 1000)

    def call_at(self, when_ms: int, fn: Callable[[], None]) -> TimerHandle:
        handle = TimerHandle()
        with self._cond:
            heapq.heappush(self._heap, (int(when_ms), next(self._seq), handle, fn))
            self._cond.notify()
        return handle

    def call_later(self, delay_ms: int, fn: Callable[[], None]) -> TimerHandle:
        return self.call_at(self.now_ms() + delay_ms, fn)

    def stop(self):
        with self._cond:
            self._stopped = True
            self._cond.notify()

    def _loop(self):
        while True:
            with self._cond:
                if self._stopped:
                    return
                if not self._heap:
                    self._cond.wait()
                    continue
                due, _, handle, fn = self._heap[0]
                wait_s = (due - self.now_ms()) / 1000.0
                if wait_s > 0:
                    self._cond.wait(timeout=wait_s)
                    continue
                heapq.heappop(self._heap)
            if handle.cancelled:
                continue
            try:
                fn()
            except Exception:
                log.exception("timer callback failed")
