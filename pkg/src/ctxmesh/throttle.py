"""Notification pacing: one gate per subscription.

The gate guarantees two things for a throttling window of w ms:

* consecutive emissions are at least w apart, and
* under the aggregating policies, nothing is lost and nothing waits
  more than w past its arrival (the window is anchored at the last
  emission, so an idle-start event goes out immediately).

The drop policy simply discards events that land inside the window.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Optional

from .clock import Clock, TimerHandle
from .errors import InvalidSubscription
from .model import (
    TIMESTAMP_META,
    ContextAttribute,
    ContextElement,
    Metadatum,
)

AGGREGATE_FNS = ("avg", "min", "max", "last")

POLICY_DROP = "drop"
POLICY_AGGREGATE_SET = "aggregate_set"
POLICY_AGGREGATE_FN = "aggregate_fn"


@dataclass(frozen=True)
class Policy:
    kind: str = POLICY_DROP
    fn: Optional[str] = None

    def __post_init__(self):
        if self.kind not in (POLICY_DROP, POLICY_AGGREGATE_SET, POLICY_AGGREGATE_FN):
            raise InvalidSubscription(f"unknown policy kind {self.kind!r}")
        if self.kind == POLICY_AGGREGATE_FN:
            if self.fn not in AGGREGATE_FNS:
                raise InvalidSubscription(f"aggregate fn must be one of {AGGREGATE_FNS}")
        elif self.fn is not None:
            raise InvalidSubscription(f"policy {self.kind!r} does not take a fn")

    @property
    def aggregating(self) -> bool:
        return self.kind in (POLICY_AGGREGATE_SET, POLICY_AGGREGATE_FN)

    def to_wire(self) -> dict:
        wire = {"kind": self.kind}
        if self.fn is not None:
            wire["fn"] = self.fn
        return wire

    @classmethod
    def from_wire(cls, obj) -> "Policy":
        if not isinstance(obj, dict) or "kind" not in obj:
            raise InvalidSubscription("policy must be an object with a 'kind'")
        unknown = set(obj) - {"kind", "fn"}
        if unknown:
            raise InvalidSubscription(f"policy has unknown keys {sorted(unknown)}")
        return cls(obj["kind"], obj.get("fn"))


def _is_number(value) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _aggregate_values(fn: str, values: list) -> tuple[object, str]:
    """Apply fn; non-numeric input falls back to taking the last value."""
    if fn != "last" and not all(_is_number(v) for v in values):
        return values[-1], "last"
    if fn == "avg":
        return sum(values) / len(values), fn
    if fn == "min":
        return min(values), fn
    if fn == "max":
        return max(values), fn
    return values[-1], fn


def synthesize_fn_elements(
    buffered: list[tuple[ContextElement, int]], fn: str, at_ms: int
) -> tuple[list[ContextElement], str]:
    """Collapse buffered snapshots into one element per (entity, attribute).

    Groups keep first-appearance order. Attributes falling back to "last"
    (non-numeric values) demote the whole notification's aggregation tag.
    """
    order: list[tuple[str, str, str]] = []
    groups: dict[tuple[str, str, str], list[ContextAttribute]] = {}
    entities = {}
    for element, _ in buffered:
        for attr in element.attributes:
            key = (element.entity.type, element.entity.id, attr.name)
            if key not in groups:
                groups[key] = []
                order.append(key)
                entities[key] = element.entity
            groups[key].append(attr)

    tag = fn
    elements = []
    for key in order:
        attrs = groups[key]
        value, used = _aggregate_values(fn, [a.value for a in attrs])
        if used != fn:
            tag = "last"
        synthetic = ContextAttribute(
            name=attrs[-1].name,
            type=attrs[-1].type,
            value=value,
            metadata=(Metadatum(TIMESTAMP_META, "epoch_ms", at_ms),),
        )
        elements.append(ContextElement(entities[key], (synthetic,)))
    return elements, tag


class ThrottleGate:
    """State machine deciding emit-now / buffer / drop for one subscription.

    ``emit(elements, aggregation, at_ms)`` is invoked for every outbound
    notification; the caller owns actual delivery.
    """

    def __init__(self, clock: Clock, throttling_ms: int, policy: Policy,
                 emit: Callable[[list[ContextElement], str, int], None]):
        if throttling_ms < 0:
            raise InvalidSubscription("throttling must be >= 0")
        self._clock = clock
        self.throttling_ms = throttling_ms
        self.policy = policy
        self._emit = emit
        self._last_emit: Optional[int] = None
        self._buffer: list[tuple[ContextElement, int]] = []
        self._timer: Optional[TimerHandle] = None
        self._timer_due: Optional[int] = None
        self._lock = threading.RLock()

    # -- bookkeeping -------------------------------------------------------

    def note_emission(self, at_ms: int):
        """Record an emission made outside the gate (the bootstrap notify)."""
        with self._lock:
            self._last_emit = at_ms

    def _gap_open(self, now_ms: int) -> bool:
        return self._last_emit is None or now_ms - self._last_emit >= self.throttling_ms

    def _arm_timer(self):
        due = (self._last_emit or 0) + self.throttling_ms
        if self._timer_due == due and self._timer is not None and not self._timer.cancelled:
            return
        if self._timer is not None:
            self._timer.cancel()
        self._timer_due = due
        self._timer = self._clock.call_at(due, self._on_timer)

    def _disarm_timer(self):
        if self._timer is not None:
            self._timer.cancel()
        self._timer = None
        self._timer_due = None

    # -- events ------------------------------------------------------------

    def on_event(self, element: ContextElement, now_ms: int) -> str:
        """Feed one matching snapshot; returns emitted|buffered|dropped."""
        with self._lock:
            # Catch up if a due timer has not fired yet (only possible under
            # a wall clock; the simulated clock drains timers first).
            if self._timer_due is not None and now_ms >= self._timer_due and self._buffer:
                self._flush_buffer(now_ms)

            if self.throttling_ms == 0:
                self._last_emit = now_ms
                self._emit([element], "none", now_ms)
                return "emitted"

            if self.policy.kind == POLICY_DROP:
                if self._gap_open(now_ms):
                    self._last_emit = now_ms
                    self._emit([element], "none", now_ms)
                    return "emitted"
                return "dropped"

            if self._gap_open(now_ms) and not self._buffer:
                self._last_emit = now_ms
                self._emit(*self._aggregate([(element, now_ms)], now_ms), now_ms)
                return "emitted"
            self._buffer.append((element, now_ms))
            self._arm_timer()
            return "buffered"

    def _on_timer(self):
        with self._lock:
            now = self._clock.now_ms()
            self._timer = None
            self._timer_due = None
            if self._buffer:
                self._flush_buffer(now)

    def _aggregate(self, buffered, at_ms: int) -> tuple[list[ContextElement], str]:
        if self.policy.kind == POLICY_AGGREGATE_SET:
            return [element for element, _ in buffered], "set"
        return synthesize_fn_elements(buffered, self.policy.fn, at_ms)

    def _flush_buffer(self, now_ms: int):
        buffered, self._buffer = self._buffer, []
        self._disarm_timer()
        self._last_emit = now_ms
        elements, tag = self._aggregate(buffered, now_ms)
        self._emit(elements, tag, now_ms)

    def flush(self, now_ms: int) -> bool:
        """Terminal flush (unsubscribe/expiry); emits any buffered events."""
        with self._lock:
            if not self._buffer:
                self._disarm_timer()
                return False
            self._flush_buffer(now_ms)
            return True

    def cancel(self):
        with self._lock:
            self._disarm_timer()
            self._buffer.clear()

    @property
    def buffered(self) -> int:
        with self._lock:
            return len(self._buffer)
