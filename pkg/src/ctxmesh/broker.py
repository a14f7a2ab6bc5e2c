"""Single-node context broker.

Keeps the latest attribute values per (entity id, type), answers filtered
queries, and dispatches throttled subscription notifications. Updates are
attribute-level merges: attributes listed in an update overwrite stored
ones, everything else survives.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from typing import Optional

from .clock import Clock
from .delivery import DeliveryQueue
from .errors import (
    CtxMeshError,
    InvalidSubscription,
    InvariantViolation,
    UnknownPath,
    UnknownSubscription,
)
from .model import (
    ContextAttribute,
    ContextElement,
    DataModel,
    EntityRef,
    Scope,
    harmonize,
    scope_matches,
    scopes_from_wire,
)
from .network import NetworkHandle
from .throttle import Policy, ThrottleGate

log = logging.getLogger("ctxmesh.broker")

NOTIFY_PATH = "/v1/notify"
DEFAULT_SUBSCRIPTION_TTL_MS = 3_600_000


@dataclass(frozen=True)
class Subscription:
    """A standing context request with throttled notification delivery."""

    id: str
    patterns: tuple[EntityRef, ...]
    attribute_filter: tuple[str, ...]
    scopes: tuple[Scope, ...]
    notify_endpoint: str
    throttling_ms: int
    policy: Policy
    expires_ms: int

    def to_wire(self) -> dict:
        return {
            "attributes": list(self.attribute_filter),
            "expiresMs": self.expires_ms,
            "id": self.id,
            "notifyEndpoint": self.notify_endpoint,
            "patterns": [p.to_wire() for p in self.patterns],
            "policy": self.policy.to_wire(),
            "scopes": [s.to_wire() for s in self.scopes],
            "throttlingMs": self.throttling_ms,
        }

    @classmethod
    def from_wire(cls, body: dict, sub_id: str, now_ms: int) -> "Subscription":
        if not isinstance(body, dict):
            raise InvalidSubscription("subscription must be an object")
        unknown = set(body) - {
            "patterns", "attributes", "scopes", "notifyEndpoint",
            "throttlingMs", "policy", "expiresMs",
        }
        if unknown:
            raise InvalidSubscription(f"unknown subscription keys {sorted(unknown)}")
        try:
            patterns = tuple(
                EntityRef.from_wire(p, f"patterns[{i}]")
                for i, p in enumerate(body.get("patterns", []))
            )
            scopes = scopes_from_wire(body.get("scopes", []))
        except InvariantViolation as exc:
            raise InvalidSubscription(exc.detail) from exc
        attributes = body.get("attributes", [])
        if not isinstance(attributes, list) or not all(isinstance(a, str) for a in attributes):
            raise InvalidSubscription("attributes must be a list of names")
        endpoint = body.get("notifyEndpoint")
        if not isinstance(endpoint, str) or not endpoint:
            raise InvalidSubscription("notifyEndpoint must be a non-empty URL")
        throttling = body.get("throttlingMs", 0)
        if not isinstance(throttling, int) or isinstance(throttling, bool) or throttling < 0:
            raise InvalidSubscription("throttlingMs must be an integer >= 0")
        policy = Policy.from_wire(body.get("policy", {"kind": "drop"}))
        expires = body.get("expiresMs", now_ms + DEFAULT_SUBSCRIPTION_TTL_MS)
        if not isinstance(expires, int) or isinstance(expires, bool):
            raise InvalidSubscription("expiresMs must be an integer")
        if expires <= now_ms:
            raise InvalidSubscription(f"expiresMs {expires} is not in the future")
        return cls(sub_id, patterns, tuple(attributes), scopes, endpoint,
                   throttling, policy, expires)

    def selects(self, entity: EntityRef) -> bool:
        return any(p.matches(entity.id, entity.type) for p in self.patterns)


@dataclass
class _StoredEntity:
    entity: EntityRef
    attributes: dict[str, ContextAttribute] = field(default_factory=dict)
    updated_seq: dict[str, int] = field(default_factory=dict)

    def element(self) -> ContextElement:
        ordered = sorted(self.attributes)
        return ContextElement(self.entity, tuple(self.attributes[n] for n in ordered))


class _SubState:
    def __init__(self, sub: Subscription, gate: ThrottleGate, queue: DeliveryQueue):
        self.sub = sub
        self.gate = gate
        self.queue = queue


def notification_wire(sub_id: str, elements: list[ContextElement], aggregation: str) -> dict:
    return {
        "aggregation": aggregation,
        "elements": [e.to_wire() for e in elements],
        "subscriptionId": sub_id,
    }


class Broker:
    """Latest-value context store with throttled subscriptions."""

    def __init__(self, node_id: str, endpoint: str, clock: Clock, net: NetworkHandle,
                 models: Optional[dict[str, DataModel]] = None):
        self.node_id = node_id
        self.endpoint = endpoint
        self._clock = clock
        self._net = net
        self._models = models or {}
        self._store: dict[tuple[str, str], _StoredEntity] = {}
        self._subs: dict[str, _SubState] = {}
        self._seq = 0
        self._sub_counter = 0
        self._lock = threading.RLock()

    # -- wire dispatch -------------------------------------------------------

    def handle(self, path: str, body: dict, headers: dict[str, str]) -> dict:
        if path == "/v1/updateContext":
            return self.update_context_wire(body)
        if path == "/v1/queryContext":
            return self.query_context_wire(body)
        if path == "/v1/subscribeContext":
            return {"id": self.subscribe_context(body)}
        if path == "/v1/unsubscribeContext":
            self.unsubscribe_context(body.get("id", ""))
            return {"ok": True}
        if path == "/v1/status":
            return self.status()
        raise UnknownPath(path)

    def status(self) -> dict:
        with self._lock:
            return {
                "entities": len(self._store),
                "kind": "broker",
                "nodeId": self.node_id,
                "subscriptions": len(self._subs),
            }

    # -- updates ---------------------------------------------------------

    def update_context_wire(self, body: dict) -> dict:
        if not isinstance(body, dict) or not isinstance(body.get("elements"), list):
            raise InvariantViolation("elements", "update body must carry an elements list")
        statuses = []
        for i, raw in enumerate(body["elements"]):
            try:
                element = ContextElement.from_wire(raw, f"elements[{i}]")
                self.apply_update(element)
            except CtxMeshError as exc:
                statuses.append({"ok": False, "error": exc.code, "detail": exc.detail})
            else:
                statuses.append({"ok": True})
        return {"statuses": statuses}

    def apply_update(self, element: ContextElement):
        """Merge one element into the store and feed matching subscriptions."""
        model = self._models.get(element.entity.type)
        if model is not None:
            element = harmonize(element, model)
        now = self._clock.now_ms()
        with self._lock:
            self._seq += 1
            key = (element.entity.type, element.entity.id)
            stored = self._store.get(key)
            if stored is None:
                stored = _StoredEntity(element.entity)
                self._store[key] = stored
            for attr in element.attributes:
                stored.attributes[attr.name] = attr
                stored.updated_seq[attr.name] = self._seq
            merged = stored.element()
            fanout = self._match_subscriptions(element, merged, now)
        for state, snapshot in fanout:
            state.gate.on_event(snapshot, now)

    def _match_subscriptions(self, update: ContextElement, merged: ContextElement,
                             now: int) -> list[tuple[_SubState, ContextElement]]:
        matched = []
        for sub_id in list(self._subs):
            state = self._subs[sub_id]
            if state.sub.expires_ms <= now:
                self._purge(state, now)
                continue
            sub = state.sub
            if not sub.selects(update.entity):
                continue
            # Scopes gate on the merged entity state; the delivered snapshot
            # carries only the freshly updated attributes.
            if not all(scope_matches(s, merged) for s in sub.scopes):
                continue
            if sub.attribute_filter:
                attrs = tuple(a for a in update.attributes if a.name in sub.attribute_filter)
                if not attrs:
                    continue
                snapshot = update.with_attributes(attrs)
            else:
                snapshot = update
            matched.append((state, snapshot))
        return matched

    # -- queries -----------------------------------------------------------

    def query_context_wire(self, body: dict) -> dict:
        if not isinstance(body, dict):
            raise InvariantViolation("query", "query body must be an object")
        unknown = set(body) - {"entities", "attributes", "scopes"}
        if unknown:
            raise InvariantViolation("query", f"unknown query keys {sorted(unknown)}")
        patterns = tuple(
            EntityRef.from_wire(p, f"entities[{i}]")
            for i, p in enumerate(body.get("entities", []))
        )
        attributes = body.get("attributes", [])
        if not isinstance(attributes, list) or not all(isinstance(a, str) for a in attributes):
            raise InvariantViolation("attributes", "attributes must be a list of names")
        scopes = scopes_from_wire(body.get("scopes", []))
        elements = self.query_context(patterns, tuple(attributes), scopes)
        return {"elements": [e.to_wire() for e in elements], "partial": []}

    def query_context(self, patterns: tuple[EntityRef, ...], attribute_filter: tuple[str, ...],
                      scopes: tuple[Scope, ...]) -> list[ContextElement]:
        with self._lock:
            results = []
            for key in sorted(self._store):
                stored = self._store[key]
                if not any(p.matches(stored.entity.id, stored.entity.type) for p in patterns):
                    continue
                element = stored.element()
                if not all(scope_matches(s, element) for s in scopes):
                    continue
                if attribute_filter:
                    attrs = tuple(a for a in element.attributes if a.name in attribute_filter)
                    if not attrs:
                        continue
                    element = element.with_attributes(attrs)
                results.append(element)
            return results

    # -- subscriptions -------------------------------------------------------

    def subscribe_context(self, body: dict) -> str:
        now = self._clock.now_ms()
        with self._lock:
            self._sub_counter += 1
            sub_id = f"s-{self.node_id}-{self._sub_counter}"
        sub = Subscription.from_wire(body, sub_id, now)
        queue = DeliveryQueue(self._net, self._clock, sub.notify_endpoint, NOTIFY_PATH,
                              name=f"{self.node_id}/{sub_id}")

        def emit(elements, aggregation, at_ms):
            queue.push(notification_wire(sub_id, elements, aggregation))

        gate = ThrottleGate(self._clock, sub.throttling_ms, sub.policy, emit)
        state = _SubState(sub, gate, queue)
        with self._lock:
            self._subs[sub_id] = state
            initial = self.query_context(sub.patterns, sub.attribute_filter, sub.scopes)
        # Bootstrap notification: current matching elements, counts as an
        # emission for throttling purposes.
        gate.note_emission(now)
        queue.push(notification_wire(sub_id, initial, "none"))
        return sub_id

    def unsubscribe_context(self, sub_id: str):
        with self._lock:
            state = self._subs.pop(sub_id, None)
        if state is None:
            raise UnknownSubscription(sub_id)
        state.gate.flush(self._clock.now_ms())
        state.queue.seal()

    def _purge(self, state: _SubState, now: int):
        """Lazy removal of an expired subscription; owed buffer still goes out."""
        state.gate.flush(now)
        state.queue.seal()
        self._subs.pop(state.sub.id, None)

    @property
    def subscription_ids(self) -> list[str]:
        with self._lock:
            return sorted(self._subs)
