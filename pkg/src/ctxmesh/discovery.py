"""Availability discovery registry.

Stores which providing endpoint can serve which entities/attributes under
which scope metadata, answers intersection queries, pushes availability
notifications to subscribers, and separates things from the sensors
observing them via ``thing_refs``.

Matching is deliberately conservative where patterns meet patterns: a
false positive only costs the caller an extra federated request, while a
false negative would hide a provider.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass
from typing import Optional

from .clock import Clock
from .delivery import DeliveryQueue
from .errors import (
    InvariantViolation,
    UnknownPath,
    UnknownSubscription,
)
from .model import (
    EntityRef,
    GeoBox,
    Scope,
    StringMatch,
    scopes_from_wire,
)
from .network import NetworkHandle

log = logging.getLogger("ctxmesh.discovery")

NOTIFY_PATH = "/v1/notify"
DEFAULT_REGISTRATION_TTL_MS = 3_600_000


@dataclass(frozen=True)
class Registration:
    """One provider's declaration of context availability."""

    id: str
    patterns: tuple[EntityRef, ...]
    attributes: tuple[tuple[str, str], ...]
    providing_endpoint: str
    scope_meta: tuple[Scope, ...]
    thing_refs: tuple[EntityRef, ...]
    expires_ms: int

    def to_wire(self) -> dict:
        return {
            "attributes": [{"name": n, "type": t} for n, t in self.attributes],
            "expiresMs": self.expires_ms,
            "id": self.id,
            "patterns": [p.to_wire() for p in self.patterns],
            "providingEndpoint": self.providing_endpoint,
            "scopeMeta": [s.to_wire() for s in self.scope_meta],
            "thingRefs": [t.to_wire() for t in self.thing_refs],
        }

    @classmethod
    def from_wire(cls, body: dict, reg_id: str, now_ms: int) -> "Registration":
        if not isinstance(body, dict):
            raise InvariantViolation("registration", "registration must be an object")
        unknown = set(body) - {
            "id", "patterns", "attributes", "providingEndpoint",
            "scopeMeta", "thingRefs", "expiresMs",
        }
        if unknown:
            raise InvariantViolation("registration", f"unknown keys {sorted(unknown)}")
        patterns = tuple(
            EntityRef.from_wire(p, f"patterns[{i}]")
            for i, p in enumerate(body.get("patterns", []))
        )
        attributes = []
        for i, item in enumerate(body.get("attributes", [])):
            if not isinstance(item, dict) or "name" not in item or "type" not in item:
                raise InvariantViolation(f"attributes[{i}]", "attribute needs name and type")
            attributes.append((item["name"], item["type"]))
        endpoint = body.get("providingEndpoint")
        if not isinstance(endpoint, str) or not endpoint:
            raise InvariantViolation("providingEndpoint", "providingEndpoint must be non-empty")
        scope_meta = scopes_from_wire(body.get("scopeMeta", []), "scopeMeta")
        thing_refs = tuple(
            EntityRef.from_wire(t, f"thingRefs[{i}]")
            for i, t in enumerate(body.get("thingRefs", []))
        )
        expires = body.get("expiresMs", now_ms + DEFAULT_REGISTRATION_TTL_MS)
        if not isinstance(expires, int) or isinstance(expires, bool):
            raise InvariantViolation("expiresMs", "expiresMs must be an integer")
        if expires <= now_ms:
            raise InvariantViolation("expiresMs", f"expiresMs {expires} is not in the future")
        return cls(reg_id, patterns, tuple(attributes), endpoint, scope_meta,
                   thing_refs, expires)


@dataclass(frozen=True)
class AvailabilitySubscription:
    id: str
    patterns: tuple[EntityRef, ...]
    attributes: tuple[str, ...]
    scopes: tuple[Scope, ...]
    notify_endpoint: str
    expires_ms: int

    @classmethod
    def from_wire(cls, body: dict, sub_id: str, now_ms: int) -> "AvailabilitySubscription":
        if not isinstance(body, dict):
            raise InvariantViolation("subscription", "subscription must be an object")
        unknown = set(body) - {"patterns", "attributes", "scopes", "notifyEndpoint", "expiresMs"}
        if unknown:
            raise InvariantViolation("subscription", f"unknown keys {sorted(unknown)}")
        patterns = tuple(
            EntityRef.from_wire(p, f"patterns[{i}]")
            for i, p in enumerate(body.get("patterns", []))
        )
        attributes = body.get("attributes", [])
        if not isinstance(attributes, list) or not all(isinstance(a, str) for a in attributes):
            raise InvariantViolation("attributes", "attributes must be a list of names")
        endpoint = body.get("notifyEndpoint")
        if not isinstance(endpoint, str) or not endpoint:
            raise InvariantViolation("notifyEndpoint", "notifyEndpoint must be non-empty")
        scopes = scopes_from_wire(body.get("scopes", []))
        expires = body.get("expiresMs", now_ms + DEFAULT_REGISTRATION_TTL_MS)
        if not isinstance(expires, int) or isinstance(expires, bool) or expires <= now_ms:
            raise InvariantViolation("expiresMs", "expiresMs must be a future integer time")
        return cls(sub_id, patterns, tuple(attributes), scopes, endpoint, expires)


# -- matching rules ----------------------------------------------------------

def patterns_intersect(query: EntityRef, registered: EntityRef) -> bool:
    """Conservative overlap test between two entity references."""
    if query.type != "*" and registered.type != "*" and query.type != registered.type:
        return False
    if not query.is_pattern and not registered.is_pattern:
        return query.id == registered.id
    if query.is_pattern and registered.is_pattern:
        return True  # two patterns: assume overlap
    if query.is_pattern:
        return query.matches(registered.id, query.type if query.type != "*" else registered.type)
    return registered.matches(query.id, registered.type if registered.type != "*" else query.type)


def _attributes_intersect(query_attrs: tuple[str, ...], reg_attrs: tuple[tuple[str, str], ...]) -> bool:
    if not query_attrs or not reg_attrs:
        return True  # empty side = wildcard
    names = {name for name, _ in reg_attrs}
    return any(a in names for a in query_attrs)


def _scope_satisfied(query_scope: Scope, scope_meta: tuple[Scope, ...]) -> bool:
    for meta in scope_meta:
        if isinstance(query_scope, GeoBox) and isinstance(meta, GeoBox):
            if query_scope.intersects(meta):
                return True
        elif isinstance(query_scope, StringMatch) and isinstance(meta, StringMatch):
            if query_scope.target == meta.target and query_scope.substring in meta.substring:
                return True
    return False


def registration_matches(reg: Registration, patterns: tuple[EntityRef, ...],
                         attributes: tuple[str, ...], scopes: tuple[Scope, ...]) -> bool:
    if patterns and not any(
        patterns_intersect(q, r) for q in patterns for r in reg.patterns
    ):
        return False
    if not _attributes_intersect(attributes, reg.attributes):
        return False
    return all(_scope_satisfied(s, reg.scope_meta) for s in scopes)


class _AvailState:
    def __init__(self, sub: AvailabilitySubscription, queue: DeliveryQueue):
        self.sub = sub
        self.queue = queue


def availability_wire(sub_id: str, registrations: list[Registration],
                      removed: list[str]) -> dict:
    return {
        "registrations": [r.to_wire() for r in registrations],
        "removed": list(removed),
        "subscriptionId": sub_id,
    }


class Discovery:
    """Registry of context availability with push notifications."""

    def __init__(self, node_id: str, endpoint: str, clock: Clock, net: NetworkHandle):
        self.node_id = node_id
        self.endpoint = endpoint
        self._clock = clock
        self._net = net
        self._regs: dict[str, Registration] = {}
        self._subs: dict[str, _AvailState] = {}
        self._reg_counter = 0
        self._sub_counter = 0
        self._lock = threading.RLock()

    # -- wire dispatch -------------------------------------------------------

    def handle(self, path: str, body: dict, headers: dict[str, str]) -> dict:
        if path == "/v1/registerContext":
            return {"id": self.register_context(body)}
        if path == "/v1/discoverContextAvailability":
            return self.discover_wire(body)
        if path == "/v1/subscribeContextAvailability":
            return {"id": self.subscribe_availability(body)}
        if path == "/v1/unsubscribeContextAvailability":
            self.unsubscribe_availability(body.get("id", ""))
            return {"ok": True}
        if path == "/v1/resolveThing":
            return self.resolve_thing_wire(body)
        if path == "/v1/status":
            with self._lock:
                return {
                    "kind": "discovery",
                    "nodeId": self.node_id,
                    "registrations": len(self._regs),
                    "subscriptions": len(self._subs),
                }
        raise UnknownPath(path)

    # -- registrations -------------------------------------------------------

    def register_context(self, body: dict) -> str:
        now = self._clock.now_ms()
        reg_id = body.get("id") if isinstance(body, dict) else None
        with self._lock:
            if not reg_id:
                self._reg_counter += 1
                reg_id = f"r-{self.node_id}-{self._reg_counter}"
        reg = Registration.from_wire(body, reg_id, now)
        with self._lock:
            self._regs[reg_id] = reg
            watchers = [
                state for state in self._subs.values()
                if state.sub.expires_ms > now
                and registration_matches(reg, state.sub.patterns, state.sub.attributes,
                                         state.sub.scopes)
            ]
        self._clock.call_at(reg.expires_ms, lambda: self._expire(reg_id, reg.expires_ms))
        for state in watchers:
            state.queue.push(availability_wire(state.sub.id, [reg], []))
        return reg_id

    def _expire(self, reg_id: str, expected_expiry: int):
        now = self._clock.now_ms()
        with self._lock:
            reg = self._regs.get(reg_id)
            # A renewal moved the expiry; this timer is stale.
            if reg is None or reg.expires_ms > now or reg.expires_ms != expected_expiry:
                return
            del self._regs[reg_id]
            watchers = [
                state for state in self._subs.values()
                if state.sub.expires_ms > now
                and registration_matches(reg, state.sub.patterns, state.sub.attributes,
                                         state.sub.scopes)
            ]
        log.debug("%s: registration %s expired", self.node_id, reg_id)
        for state in watchers:
            state.queue.push(availability_wire(state.sub.id, [], [reg_id]))

    # -- discovery -----------------------------------------------------------

    def discover_wire(self, body: dict) -> dict:
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
        regs = self.discover(patterns, tuple(attributes), scopes)
        return {"registrations": [r.to_wire() for r in regs]}

    def discover(self, patterns: tuple[EntityRef, ...], attributes: tuple[str, ...],
                 scopes: tuple[Scope, ...]) -> list[Registration]:
        now = self._clock.now_ms()
        with self._lock:
            return [
                self._regs[reg_id]
                for reg_id in sorted(self._regs)
                if self._regs[reg_id].expires_ms > now
                and registration_matches(self._regs[reg_id], patterns, attributes, scopes)
            ]

    def resolve_thing_wire(self, body: dict) -> dict:
        if not isinstance(body, dict) or "thing" not in body:
            raise InvariantViolation("thing", "body must carry a thing reference")
        thing = EntityRef.from_wire(body["thing"], "thing")
        if thing.is_pattern:
            raise InvariantViolation("thing", "thing reference must be literal")
        return {"registrations": [r.to_wire() for r in self.resolve_thing(thing)]}

    def resolve_thing(self, thing: EntityRef) -> list[Registration]:
        """Registrations of sensor resources observing the given thing."""
        now = self._clock.now_ms()
        with self._lock:
            return [
                self._regs[reg_id]
                for reg_id in sorted(self._regs)
                if self._regs[reg_id].expires_ms > now
                and any(ref.matches(thing.id, thing.type) for ref in self._regs[reg_id].thing_refs)
            ]

    # -- availability subscriptions -------------------------------------------

    def subscribe_availability(self, body: dict) -> str:
        now = self._clock.now_ms()
        with self._lock:
            self._sub_counter += 1
            sub_id = f"as-{self.node_id}-{self._sub_counter}"
        sub = AvailabilitySubscription.from_wire(body, sub_id, now)
        queue = DeliveryQueue(self._net, self._clock, sub.notify_endpoint, NOTIFY_PATH,
                              name=f"{self.node_id}/{sub_id}")
        state = _AvailState(sub, queue)
        with self._lock:
            self._subs[sub_id] = state
            current = self.discover(sub.patterns, sub.attributes, sub.scopes)
        queue.push(availability_wire(sub_id, current, []))
        return sub_id

    def unsubscribe_availability(self, sub_id: str):
        with self._lock:
            state = self._subs.pop(sub_id, None)
        if state is None:
            raise UnknownSubscription(sub_id)
        state.queue.seal()

    @property
    def registration_ids(self) -> list[str]:
        with self._lock:
            return sorted(self._regs)
