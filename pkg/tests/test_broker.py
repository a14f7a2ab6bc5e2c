"""Broker: latest-value merge, queries, subscriptions, delivery retries."""

from __future__ import annotations

import pytest

from ctxmesh.errors import InvalidSubscription, TransportError, UnknownSubscription
from ctxmesh.model import builtin_models

from conftest import Rig, element, values_of


def wire(e):
    return e.to_wire()


def test_attribute_level_merge(rig: Rig):
    b = rig.broker("b1")
    rig.post("b1", "/v1/updateContext", {"elements": [wire(element("e1", "T", temp=1))]})
    rig.post("b1", "/v1/updateContext", {"elements": [wire(element("e1", "T", hum=2))]})
    out = rig.post("b1", "/v1/queryContext",
                   {"entities": [{"id": "e1", "isPattern": False, "type": "T"}]})
    attrs = {a["name"]: a["value"] for a in out["elements"][0]["attributes"]}
    assert attrs == {"temp": 1, "hum": 2}
    assert out["partial"] == []


def test_latest_value_wins(rig: Rig):
    rig.broker("b1")
    rig.post("b1", "/v1/updateContext", {"elements": [wire(element("e1", "T", temp=1))]})
    rig.post("b1", "/v1/updateContext", {"elements": [wire(element("e1", "T", temp=2))]})
    out = rig.post("b1", "/v1/queryContext",
                   {"entities": [{"id": "e1", "isPattern": False, "type": "T"}]})
    assert out["elements"][0]["attributes"][0]["value"] == 2


def test_bad_element_rejected_others_applied(rig: Rig):
    rig.broker("b1")
    dup = {
        "entity": {"id": "e2", "isPattern": False, "type": "T"},
        "attributes": [
            {"name": "a", "type": "number", "value": 1, "metadata": []},
            {"name": "a", "type": "number", "value": 2, "metadata": []},
        ],
    }
    out = rig.post("b1", "/v1/updateContext",
                   {"elements": [dup, wire(element("e1", "T", temp=5))]})
    assert out["statuses"][0]["ok"] is False
    assert out["statuses"][0]["error"] == "InvariantViolation"
    assert out["statuses"][1]["ok"] is True
    q = rig.post("b1", "/v1/queryContext",
                 {"entities": [{"id": ".*", "isPattern": True, "type": "T"}]})
    assert [e["entity"]["id"] for e in q["elements"]] == ["e1"]


def test_query_patterns_filters_and_scopes(rig: Rig):
    rig.broker("b1")
    rig.post("b1", "/v1/updateContext", {"elements": [
        wire(element("e1", "T", temp=1, hum=7, location=[5.0, 5.0])),
        wire(element("e2", "T", temp=2, location=[50.0, 50.0])),
        wire(element("x9", "U", temp=3)),
    ]})
    match_all = rig.post("b1", "/v1/queryContext",
                         {"entities": [{"id": ".*", "isPattern": True, "type": "T"}]})
    assert [e["entity"]["id"] for e in match_all["elements"]] == ["e1", "e2"]

    wildcard_type = rig.post("b1", "/v1/queryContext",
                             {"entities": [{"id": ".*", "isPattern": True, "type": "*"}]})
    assert len(wildcard_type["elements"]) == 3

    projected = rig.post("b1", "/v1/queryContext", {
        "entities": [{"id": "e1", "isPattern": False, "type": "T"}],
        "attributes": ["temp"],
    })
    assert [a["name"] for a in projected["elements"][0]["attributes"]] == ["temp"]

    scoped = rig.post("b1", "/v1/queryContext", {
        "entities": [{"id": ".*", "isPattern": True, "type": "T"}],
        "scopes": [{"kind": "geo_box", "minLat": 0, "minLon": 0, "maxLat": 10, "maxLon": 10}],
    })
    assert [e["entity"]["id"] for e in scoped["elements"]] == ["e1"]


def test_query_deterministic_bytes(rig: Rig):
    from ctxmesh.model import canonical_dumps

    rig.broker("b1")
    rig.post("b1", "/v1/updateContext", {"elements": [
        wire(element("e2", "T", b=1, a=2)), wire(element("e1", "T", z=0))]})
    body = {"entities": [{"id": ".*", "isPattern": True, "type": "T"}]}
    first = canonical_dumps(rig.post("b1", "/v1/queryContext", body))
    second = canonical_dumps(rig.post("b1", "/v1/queryContext", body))
    assert first == second


def test_subscribe_initial_notification(rig: Rig):
    rig.broker("b1")
    sink = rig.sink("s")
    rig.post("b1", "/v1/updateContext", {"elements": [wire(element("e1", "T", temp=1))]})
    sub = rig.post("b1", "/v1/subscribeContext", {
        "patterns": [{"id": ".*", "isPattern": True, "type": "T"}],
        "notifyEndpoint": "mem://s", "throttlingMs": 0,
        "policy": {"kind": "drop"}, "expiresMs": 10 ** 9,
    })
    rig.drain()
    assert len(sink.notes) == 1
    t, body = sink.notes[0]
    assert body["subscriptionId"] == sub["id"]
    assert body["aggregation"] == "none"
    assert values_of(sink.notes, "temp") == [1]


def test_subscribe_matching_nothing_still_notifies_empty(rig: Rig):
    rig.broker("b1")
    sink = rig.sink("s")
    rig.post("b1", "/v1/subscribeContext", {
        "patterns": [{"id": ".*", "isPattern": True, "type": "Nope"}],
        "notifyEndpoint": "mem://s", "expiresMs": 10 ** 9,
    })
    rig.drain()
    assert len(sink.notes) == 1
    assert sink.notes[0][1]["elements"] == []


def test_two_identical_subscriptions_are_independent(rig: Rig):
    rig.broker("b1")
    rig.sink("s")
    body = {
        "patterns": [{"id": ".*", "isPattern": True, "type": "T"}],
        "notifyEndpoint": "mem://s", "throttlingMs": 100,
        "policy": {"kind": "drop"}, "expiresMs": 10 ** 9,
    }
    first = rig.post("b1", "/v1/subscribeContext", body)
    second = rig.post("b1", "/v1/subscribeContext", body)
    assert first["id"] != second["id"]


def test_attribute_filter_projects_notifications(rig: Rig):
    rig.broker("b1")
    sink = rig.sink("s")
    rig.post("b1", "/v1/subscribeContext", {
        "patterns": [{"id": ".*", "isPattern": True, "type": "T"}],
        "attributes": ["temp"],
        "notifyEndpoint": "mem://s", "expiresMs": 10 ** 9,
    })
    rig.drain()
    rig.post("b1", "/v1/updateContext",
             {"elements": [wire(element("e1", "T", temp=3, hum=9))]})
    rig.drain()
    names = [a["name"] for a in sink.notes[1][1]["elements"][0]["attributes"]]
    assert names == ["temp"]
    # An update not listing a filtered attribute produces no event.
    rig.post("b1", "/v1/updateContext", {"elements": [wire(element("e1", "T", hum=10))]})
    rig.drain()
    assert len(sink.notes) == 2


def test_scope_gates_on_merged_entity_state(rig: Rig):
    rig.broker("b1")
    sink = rig.sink("s")
    rig.post("b1", "/v1/updateContext",
             {"elements": [wire(element("e1", "T", location=[5.0, 5.0]))]})
    rig.post("b1", "/v1/subscribeContext", {
        "patterns": [{"id": ".*", "isPattern": True, "type": "T"}],
        "attributes": ["temp"],
        "scopes": [{"kind": "geo_box", "minLat": 0, "minLon": 0, "maxLat": 10, "maxLon": 10}],
        "notifyEndpoint": "mem://s", "expiresMs": 10 ** 9,
    })
    rig.drain()
    # temp update matches because the stored location is inside the box.
    rig.post("b1", "/v1/updateContext", {"elements": [wire(element("e1", "T", temp=4))]})
    rig.drain()
    assert values_of(sink.notes, "temp") == [4]


def test_unsubscribe_flushes_buffer_then_stops(rig: Rig):
    rig.broker("b1")
    sink = rig.sink("s")
    sub = rig.post("b1", "/v1/subscribeContext", {
        "patterns": [{"id": ".*", "isPattern": True, "type": "T"}],
        "notifyEndpoint": "mem://s", "throttlingMs": 10_000,
        "policy": {"kind": "aggregate_set"}, "expiresMs": 10 ** 9,
    })
    rig.drain()
    rig.post("b1", "/v1/updateContext", {"elements": [wire(element("e1", "T", v=1))]})
    rig.post("b1", "/v1/updateContext", {"elements": [wire(element("e1", "T", v=2))]})
    rig.drain()
    assert values_of(sink.notes, "v") == []  # buffered
    rig.post("b1", "/v1/unsubscribeContext", {"id": sub["id"]})
    rig.drain()
    assert values_of(sink.notes, "v") == [1, 2]
    rig.post("b1", "/v1/updateContext", {"elements": [wire(element("e1", "T", v=3))]})
    rig.advance(100_000)
    assert values_of(sink.notes, "v") == [1, 2]


def test_unsubscribe_twice_errors(rig: Rig):
    rig.broker("b1")
    rig.sink("s")
    sub = rig.post("b1", "/v1/subscribeContext", {
        "patterns": [{"id": "e1", "isPattern": False, "type": "T"}],
        "notifyEndpoint": "mem://s", "expiresMs": 10 ** 9,
    })
    rig.post("b1", "/v1/unsubscribeContext", {"id": sub["id"]})
    with pytest.raises(UnknownSubscription):
        rig.post("b1", "/v1/unsubscribeContext", {"id": sub["id"]})


def test_expired_subscription_lazily_purged(rig: Rig):
    broker = rig.broker("b1")
    sink = rig.sink("s")
    rig.post("b1", "/v1/subscribeContext", {
        "patterns": [{"id": ".*", "isPattern": True, "type": "T"}],
        "notifyEndpoint": "mem://s", "expiresMs": 500,
    })
    rig.drain()
    rig.advance(1000)
    rig.post("b1", "/v1/updateContext", {"elements": [wire(element("e1", "T", v=1))]})
    rig.drain()
    assert values_of(sink.notes, "v") == []
    assert broker.subscription_ids == []


def test_invalid_subscriptions_rejected(rig: Rig):
    rig.broker("b1")
    cases = [
        {"patterns": [{"id": "[", "isPattern": True, "type": "T"}],
         "notifyEndpoint": "mem://s", "expiresMs": 10 ** 9},
        {"patterns": [], "notifyEndpoint": "", "expiresMs": 10 ** 9},
        {"patterns": [], "notifyEndpoint": "mem://s", "expiresMs": 0},
        {"patterns": [], "notifyEndpoint": "mem://s", "throttlingMs": -5,
         "expiresMs": 10 ** 9},
        {"patterns": [], "notifyEndpoint": "mem://s", "policy": {"kind": "aggregate_fn"},
         "expiresMs": 10 ** 9},
    ]
    for body in cases:
        with pytest.raises(InvalidSubscription):
            rig.post("b1", "/v1/subscribeContext", body)


def test_delivery_retries_and_gives_up(rig: Rig):
    rig.broker("b1")

    class Flaky:
        node_id = "flaky"

        def __init__(self, failures):
            self.failures = failures
            self.received = []

        def handle(self, path, body, headers):
            if self.failures > 0:
                self.failures -= 1
                raise TransportError("down")
            self.received.append(body)
            return {"ok": True}

    flaky = Flaky(failures=1)
    rig.net.register("flaky", flaky)
    rig.post("b1", "/v1/subscribeContext", {
        "patterns": [{"id": ".*", "isPattern": True, "type": "T"}],
        "notifyEndpoint": "mem://flaky", "expiresMs": 10 ** 9,
    })
    rig.advance(200)  # first retry is 100ms later
    assert len(flaky.received) == 1

    dead = Flaky(failures=10 ** 6)
    rig.net.register("dead", dead)
    rig.post("b1", "/v1/subscribeContext", {
        "patterns": [{"id": ".*", "isPattern": True, "type": "T"}],
        "notifyEndpoint": "mem://dead", "expiresMs": 10 ** 9,
    })
    rig.advance(20_000)
    # 3 attempts, then dropped; subscription remains active.
    assert 10 ** 6 - dead.failures == 3
    rig.post("b1", "/v1/updateContext", {"elements": [wire(element("e1", "T", v=1))]})
    rig.advance(40_000)
    assert 10 ** 6 - dead.failures == 6


def test_broker_harmonizes_updates_with_matching_model(rig: Rig):
    rig.broker("b1", models=builtin_models())
    raw = {
        "entity": {"id": "w1", "isPattern": False, "type": "WeatherObserved"},
        "attributes": [{"name": "position", "type": "geo:point", "value": [1.0, 2.0],
                        "metadata": []}],
    }
    rig.post("b1", "/v1/updateContext", {"elements": [raw]})
    out = rig.post("b1", "/v1/queryContext", {
        "entities": [{"id": "w1", "isPattern": False, "type": "WeatherObserved"}]})
    assert [a["name"] for a in out["elements"][0]["attributes"]] == ["location"]


def test_status_endpoint(rig: Rig):
    rig.broker("b1")
    out = rig.post("b1", "/v1/status", {})
    assert out["kind"] == "broker" and out["nodeId"] == "b1"
