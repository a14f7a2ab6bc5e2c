"""Transparent federation nodes.

A federation node exposes the plain broker wire surface. Queries are
answered by merging the local broker's view with the same query fanned
out to every providing endpoint found in discovery; subscriptions are
relayed: the node subscribes unthrottled at every provider and applies
the consumer's throttling policy itself, so the consumer sees one
coherent stream no matter how many providers feed it.

Nodes compose into hierarchies by registering their own endpoint in a
parent discovery with a summary of everything registered locally. A
hop-trace header breaks routing loops: a node that sees itself in the
trace answers from its local broker only.
"""

from __future__ import annotations

import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from typing import Optional

from .broker import NOTIFY_PATH, Subscription, notification_wire
from .clock import Clock, TimerHandle
from .delivery import RETRY_BACKOFF_MS, DeliveryQueue
from .errors import (
    CtxMeshError,
    InvariantViolation,
    TransportError,
    UnknownPath,
    UnknownSubscription,
)
from .model import ContextAttribute, ContextElement, EntityRef
from .network import NetworkHandle
from .throttle import ThrottleGate

log = logging.getLogger("ctxmesh.federation")

TRACE_HEADER = "X-Fed-Trace"
DEFAULT_LEASE_MS = 30_000
MAX_LEVEL = 4


def _trace_from(headers: dict[str, str]) -> list[str]:
    for key, value in headers.items():
        if key.lower() == TRACE_HEADER.lower():
            return [part.strip() for part in value.split(",") if part.strip()]
    return []


def _attr_timestamp(attr: ContextAttribute) -> int:
    ts = attr.timestamp_ms()
    return ts if ts is not None else 0


def merge_elements(groups: list[tuple[str, list[ContextElement]]]) -> list[ContextElement]:
    """Merge per-provider element lists into one view.

    Grouped by (type, id); each attribute is taken from the candidate with
    the latest measurement timestamp (missing timestamp ranks as epoch 0),
    ties broken by the lexicographically smallest providing endpoint.
    Output is sorted by (type, id) with attributes sorted by name.
    """
    entities: dict[tuple[str, str], EntityRef] = {}
    # (type, id) -> attr name -> endpoint -> (timestamp, attribute)
    candidates: dict[tuple[str, str], dict[str, dict[str, tuple[int, ContextAttribute]]]] = {}
    for endpoint, elements in groups:
        for element in elements:
            key = (element.entity.type, element.entity.id)
            entities.setdefault(key, element.entity)
            slots = candidates.setdefault(key, {})
            for attr in element.attributes:
                slots.setdefault(attr.name, {})[endpoint] = (_attr_timestamp(attr), attr)
    merged = []
    for key in sorted(candidates):
        attrs = []
        for name in sorted(candidates[key]):
            per_endpoint = candidates[key][name]
            best_endpoint = max(per_endpoint, key=lambda ep: (per_endpoint[ep][0], _Neg(ep)))
            attrs.append(per_endpoint[best_endpoint][1])
        merged.append(ContextElement(entities[key], tuple(attrs)))
    return merged


class _Neg:
    """Inverts string ordering so max() picks the smallest endpoint on ties."""

    __slots__ = ("s",)

    def __init__(self, s: str):
        self.s = s

    def __lt__(self, other: "_Neg") -> bool:
        return self.s > other.s


class _Relay:
    """Server-side state for one federated subscription."""

    def __init__(self, sub: Subscription, gate: ThrottleGate, queue: DeliveryQueue):
        self.sub = sub
        self.gate = gate
        self.queue = queue
        self.provider_subs: dict[str, str] = {}  # endpoint -> provider sub id
        self.bootstrap_pending: set[str] = set()
        self.reg_endpoints: dict[str, str] = {}  # registration id -> endpoint
        self.avail_sub_id: Optional[str] = None


class FederationNode:
    """A broker-shaped node that routes between consumers and providers."""

    def __init__(self, node_id: str, endpoint: str, level: int, local_broker: str,
                 discovery: str, clock: Clock, net: NetworkHandle,
                 parent_discovery: Optional[str] = None, lease_ms: int = DEFAULT_LEASE_MS,
                 concurrent_fanout: bool = False):
        if not 1 <= level <= MAX_LEVEL:
            raise InvariantViolation("level", f"federation level must be 1..{MAX_LEVEL}")
        if level == MAX_LEVEL and parent_discovery:
            raise InvariantViolation("parentDiscovery", "top-level nodes have no parent")
        self.node_id = node_id
        self.endpoint = endpoint
        self.level = level
        self.local_broker = local_broker
        self.discovery = discovery
        self._clock = clock
        self._net = net
        self._lease_ms = lease_ms
        self._concurrent = concurrent_fanout
        self._relays: dict[str, _Relay] = {}
        self._provider_routes: dict[str, str] = {}  # provider sub id -> consumer sub id
        self._avail_routes: dict[str, str] = {}  # availability sub id -> consumer sub id
        self._watch_sub_id: Optional[str] = None
        self._parent_discovery = parent_discovery
        self._upward_reg_id: Optional[str] = None
        self._heartbeat: Optional[TimerHandle] = None
        self._sub_counter = 0
        self._lock = threading.RLock()
        if parent_discovery:
            self._clock.call_at(self._clock.now_ms(), lambda: self._register_upward(attempt=1))

    # -- wire dispatch -------------------------------------------------------

    def handle(self, path: str, body: dict, headers: dict[str, str]) -> dict:
        if path == "/v1/queryContext":
            return self.federated_query_wire(body, _trace_from(headers))
        if path == "/v1/updateContext":
            return self._net.request(self.local_broker, path, body)
        if path == "/v1/subscribeContext":
            return {"id": self.federated_subscribe(body, _trace_from(headers))}
        if path == "/v1/unsubscribeContext":
            self.federated_unsubscribe(body.get("id", ""))
            return {"ok": True}
        if path == "/v1/attachParent":
            return self.attach_parent_wire(body)
        if path == NOTIFY_PATH:
            return self._on_notify(body)
        if path == "/v1/status":
            with self._lock:
                return {
                    "kind": "federation",
                    "level": self.level,
                    "nodeId": self.node_id,
                    "subscriptions": len(self._relays),
                }
        raise UnknownPath(path)

    # -- queries -----------------------------------------------------------

    def federated_query_wire(self, body: dict, trace: list[str]) -> dict:
        local_only = self.node_id in trace
        groups: list[tuple[str, list[ContextElement]]] = []
        partial: set[str] = set()
        try:
            local = self._net.request(self.local_broker, "/v1/queryContext", body)
            groups.append((self.local_broker, _parse_elements(local)))
        except (TransportError, CtxMeshError) as exc:
            log.warning("%s: local broker query failed: %s", self.node_id, exc)
            partial.add(self.local_broker)
        if not local_only:
            providers = self._provider_endpoints(body)
            headers = {TRACE_HEADER: ",".join(trace + [self.node_id])}

            def fetch(ep: str):
                return self._net.request(ep, "/v1/queryContext", body, headers)

            if self._concurrent and len(providers) > 1:
                with ThreadPoolExecutor(max_workers=min(8, len(providers))) as pool:
                    futures = [(ep, pool.submit(fetch, ep)) for ep in providers]
                    outcomes = [(ep, _settle(f)) for ep, f in futures]
            else:
                outcomes = [(ep, _settle_call(fetch, ep)) for ep in providers]
            for ep, outcome in outcomes:
                if isinstance(outcome, Exception):
                    partial.add(ep)
                    continue
                groups.append((ep, _parse_elements(outcome)))
                partial.update(outcome.get("partial", []))
        merged = merge_elements(groups)
        return {"elements": [e.to_wire() for e in merged], "partial": sorted(partial)}

    def _provider_endpoints(self, query_body: dict) -> list[str]:
        """Distinct providing endpoints for a query, excluding ourselves."""
        discover_body = {
            "entities": query_body.get("entities", []),
            "attributes": query_body.get("attributes", []),
            "scopes": query_body.get("scopes", []),
        }
        try:
            found = self._net.request(self.discovery, "/v1/discoverContextAvailability",
                                      discover_body)
        except (TransportError, CtxMeshError) as exc:
            log.warning("%s: discovery unreachable, answering local-only: %s",
                        self.node_id, exc)
            return []
        endpoints = set()
        for reg in found.get("registrations", []):
            ep = reg.get("providingEndpoint")
            if isinstance(ep, str) and ep and ep not in (self.endpoint, self.local_broker):
                endpoints.add(ep)
        return sorted(endpoints)

    # -- subscriptions -------------------------------------------------------

    def federated_subscribe(self, body: dict, trace: Optional[list[str]] = None) -> str:
        trace = trace or []
        now = self._clock.now_ms()
        with self._lock:
            self._sub_counter += 1
            sub_id = f"fs-{self.node_id}-{self._sub_counter}"
        sub = Subscription.from_wire(body, sub_id, now)
        queue = DeliveryQueue(self._net, self._clock, sub.notify_endpoint, NOTIFY_PATH,
                              name=f"{self.node_id}/{sub_id}")

        def emit(elements, aggregation, at_ms):
            queue.push(notification_wire(sub_id, elements, aggregation))

        gate = ThrottleGate(self._clock, sub.throttling_ms, sub.policy, emit)
        relay = _Relay(sub, gate, queue)
        with self._lock:
            self._relays[sub_id] = relay

        # Bootstrap with the current federated view.
        query_body = {
            "entities": [p.to_wire() for p in sub.patterns],
            "attributes": list(sub.attribute_filter),
            "scopes": [s.to_wire() for s in sub.scopes],
        }
        initial = self.federated_query_wire(query_body, trace)
        gate.note_emission(now)
        queue.push(notification_wire(sub_id, _parse_elements(initial), "none"))

        self._attach_provider(relay, self.local_broker, trace)
        if self.node_id not in trace:
            self._subscribe_availability(relay, query_body)
        return sub_id

    def _subscribe_availability(self, relay: _Relay, query_body: dict):
        body = {
            "patterns": query_body["entities"],
            "attributes": query_body["attributes"],
            "scopes": query_body["scopes"],
            "notifyEndpoint": self.endpoint,
            "expiresMs": relay.sub.expires_ms,
        }
        try:
            response = self._net.request(self.discovery, "/v1/subscribeContextAvailability", body)
        except (TransportError, CtxMeshError) as exc:
            log.warning("%s: availability subscribe failed: %s", self.node_id, exc)
            return
        relay.avail_sub_id = response.get("id")
        with self._lock:
            self._avail_routes[relay.avail_sub_id] = relay.sub.id

    def _attach_provider(self, relay: _Relay, endpoint: str, trace: list[str]):
        if endpoint == self.endpoint or endpoint in relay.provider_subs:
            return
        sub = relay.sub
        body = {
            "patterns": [p.to_wire() for p in sub.patterns],
            "attributes": list(sub.attribute_filter),
            "scopes": [s.to_wire() for s in sub.scopes],
            "notifyEndpoint": self.endpoint,
            "throttlingMs": 0,
            "policy": {"kind": "drop"},
            "expiresMs": sub.expires_ms,
        }
        headers = {TRACE_HEADER: ",".join(trace + [self.node_id])}
        try:
            response = self._net.request(endpoint, "/v1/subscribeContext", body, headers)
        except (TransportError, CtxMeshError) as exc:
            log.warning("%s: provider subscribe at %s failed: %s", self.node_id, endpoint, exc)
            return
        provider_sub = response.get("id")
        with self._lock:
            relay.provider_subs[endpoint] = provider_sub
            relay.bootstrap_pending.add(provider_sub)
            self._provider_routes[provider_sub] = sub.id

    def federated_unsubscribe(self, sub_id: str):
        with self._lock:
            relay = self._relays.pop(sub_id, None)
            if relay is None:
                raise UnknownSubscription(sub_id)
            for provider_sub in relay.provider_subs.values():
                self._provider_routes.pop(provider_sub, None)
            if relay.avail_sub_id:
                self._avail_routes.pop(relay.avail_sub_id, None)
        relay.gate.flush(self._clock.now_ms())
        relay.queue.seal()
        for endpoint, provider_sub in sorted(relay.provider_subs.items()):
            try:
                self._net.request(endpoint, "/v1/unsubscribeContext", {"id": provider_sub})
            except (TransportError, CtxMeshError):
                pass
        if relay.avail_sub_id:
            try:
                self._net.request(self.discovery, "/v1/unsubscribeContextAvailability",
                                  {"id": relay.avail_sub_id})
            except (TransportError, CtxMeshError):
                pass

    # -- inbound notifications ------------------------------------------------

    def _on_notify(self, body: dict) -> dict:
        if not isinstance(body, dict):
            raise InvariantViolation("notification", "notification must be an object")
        sub_id = body.get("subscriptionId", "")
        if "registrations" in body or "removed" in body:
            return self._on_availability(sub_id, body)
        return self._on_provider_data(sub_id, body)

    def _on_provider_data(self, provider_sub: str, body: dict) -> dict:
        with self._lock:
            consumer_id = self._provider_routes.get(provider_sub)
            relay = self._relays.get(consumer_id) if consumer_id else None
            if relay is None:
                return {"ok": False}
            if provider_sub in relay.bootstrap_pending:
                # First notification from a provider is its bootstrap view;
                # the consumer already got ours.
                relay.bootstrap_pending.discard(provider_sub)
                return {"ok": True}
        now = self._clock.now_ms()
        for element in _parse_elements(body):
            relay.gate.on_event(element, now)
        return {"ok": True}

    def _on_availability(self, avail_sub: str, body: dict) -> dict:
        if avail_sub == self._watch_sub_id:
            # Our own discovery changed; refresh the upward summary.
            if self._parent_discovery:
                self._register_upward(attempt=1)
            return {"ok": True}
        with self._lock:
            consumer_id = self._avail_routes.get(avail_sub)
            relay = self._relays.get(consumer_id) if consumer_id else None
        if relay is None:
            return {"ok": False}
        for reg in body.get("registrations", []):
            endpoint = reg.get("providingEndpoint", "")
            reg_id = reg.get("id", "")
            if reg_id:
                relay.reg_endpoints[reg_id] = endpoint
            if endpoint and endpoint not in (self.endpoint, self.local_broker):
                self._attach_provider(relay, endpoint, [])
        for reg_id in body.get("removed", []):
            endpoint = relay.reg_endpoints.pop(reg_id, None)
            if endpoint and endpoint not in relay.reg_endpoints.values():
                self._detach_provider(relay, endpoint)
        return {"ok": True}

    def _detach_provider(self, relay: _Relay, endpoint: str):
        with self._lock:
            provider_sub = relay.provider_subs.pop(endpoint, None)
            if provider_sub:
                self._provider_routes.pop(provider_sub, None)
                relay.bootstrap_pending.discard(provider_sub)
        if provider_sub:
            try:
                self._net.request(endpoint, "/v1/unsubscribeContext", {"id": provider_sub})
            except (TransportError, CtxMeshError):
                pass

    # -- parent attachment -----------------------------------------------------

    def attach_parent_wire(self, body: dict) -> dict:
        if not isinstance(body, dict) or not isinstance(body.get("parentDiscovery"), str):
            raise InvariantViolation("parentDiscovery", "body must carry parentDiscovery URL")
        self.attach_parent(body["parentDiscovery"])
        return {"ok": True}

    def attach_parent(self, parent_discovery: str):
        if self.level == MAX_LEVEL:
            raise InvariantViolation("parentDiscovery", "top-level nodes have no parent")
        self._parent_discovery = parent_discovery
        self._register_upward(attempt=1)

    def _summary_body(self) -> dict:
        """Union of local registrations, offered upward as one registration."""
        try:
            found = self._net.request(
                self.discovery, "/v1/discoverContextAvailability",
                {"entities": [{"id": ".*", "isPattern": True, "type": "*"}],
                 "attributes": [], "scopes": []},
            )
            registrations = found.get("registrations", [])
        except (TransportError, CtxMeshError):
            registrations = []
        patterns = {}
        attributes: set[tuple[str, str]] = set()
        wildcard_attrs = not registrations
        for reg in registrations:
            for p in reg.get("patterns", []):
                patterns[(p.get("type", ""), p.get("id", ""), bool(p.get("isPattern")))] = p
            regattrs = reg.get("attributes", [])
            if not regattrs:
                wildcard_attrs = True
            attributes.update((a["name"], a["type"]) for a in regattrs)
        body = {
            "patterns": [patterns[k] for k in sorted(patterns)],
            "attributes": [] if wildcard_attrs else [
                {"name": n, "type": t} for n, t in sorted(attributes)
            ],
            "providingEndpoint": self.endpoint,
            "expiresMs": self._clock.now_ms() + self._lease_ms,
        }
        if self._upward_reg_id:
            body["id"] = self._upward_reg_id
        return body

    def _register_upward(self, attempt: int):
        parent = self._parent_discovery
        if not parent:
            return
        self._ensure_watch()
        try:
            response = self._net.request(parent, "/v1/registerContext", self._summary_body())
        except (TransportError, CtxMeshError) as exc:
            if attempt <= len(RETRY_BACKOFF_MS):
                backoff = RETRY_BACKOFF_MS[attempt - 1]
                log.warning("%s: parent %s unreachable (attempt %d), retrying in %dms: %s",
                            self.node_id, parent, attempt, backoff, exc)
                self._clock.call_later(backoff, lambda: self._register_upward(attempt + 1))
            else:
                log.warning("%s: parent %s still unreachable; will retry at next heartbeat",
                            self.node_id, parent)
                self._schedule_heartbeat()
            return
        self._upward_reg_id = response.get("id", self._upward_reg_id)
        self._schedule_heartbeat()

    def _schedule_heartbeat(self):
        if self._heartbeat is not None:
            self._heartbeat.cancel()
        self._heartbeat = self._clock.call_later(
            max(self._lease_ms // 2, 1), lambda: self._register_upward(attempt=1)
        )

    def _ensure_watch(self):
        if self._watch_sub_id is not None:
            return
        body = {
            "patterns": [{"id": ".*", "isPattern": True, "type": "*"}],
            "attributes": [],
            "scopes": [],
            "notifyEndpoint": self.endpoint,
            "expiresMs": self._clock.now_ms() + 10 ** 12,
        }
        try:
            response = self._net.request(self.discovery, "/v1/subscribeContextAvailability", body)
            self._watch_sub_id = response.get("id")
        except (TransportError, CtxMeshError) as exc:
            log.warning("%s: cannot watch own discovery: %s", self.node_id, exc)


def _parse_elements(body: dict) -> list[ContextElement]:
    return [
        ContextElement.from_wire(raw, f"elements[{i}]")
        for i, raw in enumerate(body.get("elements", []))
    ]


def _settle(future):
    try:
        return future.result()
    except (TransportError, CtxMeshError) as exc:
        return exc


def _settle_call(fn, ep):
    try:
        return fn(ep)
    except (TransportError, CtxMeshError) as exc:
        return exc
