"""Shared rig: simulated clock + in-memory network + node factories."""

from __future__ import annotations

import pytest

from ctxmesh.broker import Broker
from ctxmesh.clock import SimClock
from ctxmesh.discovery import Discovery
from ctxmesh.federation import FederationNode
from ctxmesh.harness.sink import RecorderNode
from ctxmesh.model import ContextAttribute, ContextElement, EntityRef, Metadatum
from ctxmesh.network import InMemoryNetwork


class Rig:
    """One simulated deployment; nodes share the clock and network."""

    def __init__(self):
        self.clock = SimClock()
        self.net = InMemoryNetwork(self.clock)
        self.client = self.net.for_node("test-client")

    def endpoint(self, name: str) -> str:
        return f"mem://{name}"

    def broker(self, name: str, models=None) -> Broker:
        node = Broker(name, self.endpoint(name), self.clock, self.net.for_node(name),
                      models=models)
        self.net.register(name, node)
        return node

    def discovery(self, name: str) -> Discovery:
        node = Discovery(name, self.endpoint(name), self.clock, self.net.for_node(name))
        self.net.register(name, node)
        return node

    def federation(self, name: str, level: int, broker: str, discovery: str,
                   parent: str | None = None, lease_ms: int = 30_000) -> FederationNode:
        node = FederationNode(
            name, self.endpoint(name), level, self.endpoint(broker),
            self.endpoint(discovery), self.clock, self.net.for_node(name),
            parent_discovery=self.endpoint(parent) if parent else None,
            lease_ms=lease_ms,
        )
        self.net.register(name, node)
        return node

    def sink(self, name: str) -> RecorderNode:
        node = RecorderNode(name, self.clock)
        self.net.register(name, node)
        return node

    def post(self, node: str, path: str, body: dict, headers=None) -> dict:
        return self.client.request(self.endpoint(node), path, body, headers)

    def drain(self):
        self.clock.drain()

    def advance(self, t_ms: int):
        self.clock.advance_to(t_ms)
        self.clock.drain()


@pytest.fixture
def rig() -> Rig:
    return Rig()


def element(entity_id: str, entity_type: str, ts: int | None = None,
            **attrs) -> ContextElement:
    """Shorthand element; keyword args become number/string attributes."""
    attributes = []
    for name, value in attrs.items():
        metadata = (Metadatum("timestamp", "epoch_ms", ts),) if ts is not None else ()
        kind = ("number" if isinstance(value, (int, float)) and not isinstance(value, bool)
                else "string")
        attributes.append(ContextAttribute(name, kind, value, metadata))
    return ContextElement(EntityRef(entity_id, entity_type), tuple(attributes))


def values_of(notes, attribute: str) -> list:
    out = []
    for _, body in notes:
        for el in body.get("elements", []):
            for attr in el.get("attributes", []):
                if attr.get("name") == attribute:
                    out.append(attr.get("value"))
    return out
