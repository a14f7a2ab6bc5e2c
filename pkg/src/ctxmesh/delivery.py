"""Asynchronous at-least-once delivery queues.

One queue per (subscription | device) keeps delivery FIFO: an item is
retried up to the attempt limit before the queue moves on, so order is
preserved even across transient failures. Attempts run inside clock
timers, never on the caller's stack, so publishing is never blocked by a
slow or dead consumer.
"""

from __future__ import annotations

import logging
import threading
from collections import deque
from typing import Optional

from .clock import Clock
from .errors import CtxMeshError, TransportError
from .network import NetworkHandle

log = logging.getLogger("ctxmesh.delivery")

MAX_ATTEMPTS = 3
RETRY_BACKOFF_MS = (100, 1000, 10000)


class DeliveryQueue:
    """FIFO POST queue to one endpoint with bounded retry per item."""

    def __init__(self, net: NetworkHandle, clock: Clock, endpoint: str, path: str,
                 name: str = "", max_attempts: int = MAX_ATTEMPTS):
        self._net = net
        self._clock = clock
        self.endpoint = endpoint
        self.path = path
        self.name = name or endpoint
        self._max_attempts = max_attempts
        self._items: deque[dict] = deque()
        self._active = False
        self._closed = False
        self._sealed = False
        self._lock = threading.Lock()
        self._timer = None
        self.delivered = 0
        self.dropped = 0

    def push(self, body: dict):
        with self._lock:
            if self._closed or self._sealed:
                return
            self._items.append(body)
            if self._active:
                return
            self._active = True
        self._schedule(self._clock.now_ms(), attempt=1)

    def seal(self):
        """Accept no further items but keep delivering what is queued."""
        with self._lock:
            self._sealed = True

    def close(self):
        """Stop delivering; pending items are discarded."""
        with self._lock:
            self._closed = True
            self._items.clear()
            if self._timer is not None:
                self._timer.cancel()

    @property
    def pending(self) -> int:
        with self._lock:
            return len(self._items)

    def _schedule(self, when_ms: int, attempt: int):
        self._timer = self._clock.call_at(when_ms, lambda: self._try_head(attempt))

    def _try_head(self, attempt: int):
        with self._lock:
            if self._closed or not self._items:
                self._active = False
                return
            body = self._items[0]
        try:
            self._net.request(self.endpoint, self.path, body)
        except (TransportError, CtxMeshError) as exc:
            if attempt < self._max_attempts:
                backoff = RETRY_BACKOFF_MS[min(attempt, len(RETRY_BACKOFF_MS)) - 1]
                log.debug("%s: attempt %d failed (%s); retrying in %dms",
                          self.name, attempt, exc, backoff)
                self._schedule(self._clock.now_ms() + backoff, attempt + 1)
                return
            self.dropped += 1
            log.warning("%s: giving up after %d attempts: %s", self.name, attempt, exc)
        else:
            self.delivered += 1
        self._pop_and_continue()

    def _pop_and_continue(self):
        with self._lock:
            if self._items:
                self._items.popleft()
            if self._closed or not self._items:
                self._active = False
                return
        self._schedule(self._clock.now_ms(), attempt=1)
