"""Throttle gate state machine: the frozen traces plus policy properties."""

from __future__ import annotations

import random

from ctxmesh.clock import SimClock
from ctxmesh.throttle import Policy, ThrottleGate

from conftest import element


class Collector:
    def __init__(self):
        self.emissions = []

    def __call__(self, elements, aggregation, at_ms):
        self.emissions.append((at_ms, aggregation, elements))

    def values(self, attribute="v"):
        out = []
        for _, _, elements in self.emissions:
            for el in elements:
                attr = el.attribute(attribute)
                if attr is not None:
                    out.append(attr.value)
        return out

    @property
    def times(self):
        return [t for t, _, _ in self.emissions]


def drive(policy: Policy, theta: int, events: list[tuple[int, float]],
          settle_ms: int | None = None):
    clock = SimClock()
    out = Collector()
    gate = ThrottleGate(clock, theta, policy, out)
    for t, value in events:
        clock.advance_to(t)
        clock.drain()
        gate.on_event(element("e1", "T", v=value), t)
    clock.advance_to((events[-1][0] if events else 0) + (settle_ms or theta) + 1)
    clock.drain()
    return gate, out


def test_drop_trace_matches_reference():
    # theta=250, events at 0,100,200,300 -> emissions at 0 and 300 only
    _, out = drive(Policy("drop"), 250, [(0, 0.0), (100, 100.0), (200, 200.0), (300, 300.0)])
    assert out.times == [0, 300]
    assert out.values() == [0.0, 300.0]


def test_aggregate_set_trace_matches_reference():
    # theta=250: [v0]@0, [v100,v200]@250, [v300]@500
    _, out = drive(Policy("aggregate_set"), 250,
                   [(0, 0.0), (100, 100.0), (200, 200.0), (300, 300.0)], settle_ms=300)
    assert [(t, a) for t, a, _ in out.emissions] == [(0, "set"), (250, "set"), (500, "set")]
    assert [
        [el.attribute("v").value for el in els] for _, _, els in out.emissions
    ] == [[0.0], [100.0, 200.0], [300.0]]


def test_aggregate_avg_trace_matches_reference():
    # temp 10@0, 20@100, 30@200 -> 10@0 then avg(20,30)=25@250
    _, out = drive(Policy("aggregate_fn", "avg"), 250, [(0, 10), (100, 20), (200, 30)])
    assert out.times == [0, 250]
    assert out.values() == [10.0, 25.0]
    assert out.emissions[1][1] == "avg"


def test_zero_throttling_emits_everything():
    events = [(i, float(i)) for i in range(0, 50, 5)]
    _, out = drive(Policy("drop"), 0, events)
    assert out.values() == [v for _, v in events]


def test_fn_min_max_last():
    events = [(0, 5), (100, 9), (200, 2)]
    for fn, expected in (("min", 2), ("max", 9), ("last", 2)):
        _, out = drive(Policy("aggregate_fn", fn), 250, events)
        assert out.values() == [5.0 if fn != "last" else 5, expected], fn


def test_fn_non_numeric_falls_back_to_last():
    clock = SimClock()
    out = Collector()
    gate = ThrottleGate(clock, 250, Policy("aggregate_fn", "avg"), out)
    gate.on_event(element("e1", "T", v=1.0), 0)
    gate.on_event(element("e1", "T", v="warm"), 10)
    gate.on_event(element("e1", "T", v="hot"), 20)
    clock.advance_to(300)
    clock.drain()
    assert out.emissions[1][1] == "last"
    assert out.values() == [1.0, "hot"]


def test_fn_synthesizes_per_entity_attribute():
    clock = SimClock()
    out = Collector()
    gate = ThrottleGate(clock, 250, Policy("aggregate_fn", "avg"), out)
    gate.on_event(element("e1", "T", v=1.0), 0)  # opens the window
    gate.on_event(element("e1", "T", v=3.0), 10)
    gate.on_event(element("e2", "T", v=5.0), 20)
    clock.advance_to(250)
    clock.drain()
    _, tag, elements = out.emissions[1]
    assert tag == "avg"
    assert [(el.entity.id, el.attribute("v").value) for el in elements] == [
        ("e1", 3.0), ("e2", 5.0)]
    # synthetic elements are stamped with the emission time
    assert all(el.attributes[0].timestamp_ms() == 250 for el in elements)


def test_flush_emits_pending_buffer():
    clock = SimClock()
    out = Collector()
    gate = ThrottleGate(clock, 1000, Policy("aggregate_set"), out)
    gate.on_event(element("e1", "T", v=1), 0)
    gate.on_event(element("e1", "T", v=2), 10)
    assert gate.flush(20) is True
    assert out.values() == [1, 2]
    clock.advance_to(5000)
    clock.drain()
    assert len(out.emissions) == 2  # timer disarmed by flush


def _random_schedule(seed: int, n: int = 300, horizon: int = 20_000):
    rng = random.Random(seed)
    times = sorted(rng.randrange(horizon) for _ in range(n))
    # Strictly increasing to keep each event's identity unambiguous.
    times = [t + i for i, t in enumerate(times)]
    return [(t, float(i)) for i, t in enumerate(times)]


def test_spacing_and_no_loss_properties():
    for seed in range(4):
        for theta in (50, 250, 1000):
            events = _random_schedule(seed)
            _, agg = drive(Policy("aggregate_set"), theta, events, settle_ms=theta + 1)
            gaps = [b - a for a, b in zip(agg.times, agg.times[1:])]
            assert all(g >= theta for g in gaps), (seed, theta, gaps)
            assert sorted(agg.values()) == sorted(v for _, v in events)

            _, drop = drive(Policy("drop"), theta, events, settle_ms=theta + 1)
            gaps = [b - a for a, b in zip(drop.times, drop.times[1:])]
            assert all(g >= theta for g in gaps)
            assert set(drop.values()) <= {v for _, v in events}


def test_bounded_latency_property():
    for seed in range(3):
        events = _random_schedule(seed, n=200)
        theta = 250
        clock = SimClock()
        out = Collector()
        gate = ThrottleGate(clock, theta, Policy("aggregate_set"), out)
        arrival = {}
        for t, value in events:
            clock.advance_to(t)
            clock.drain()
            arrival[value] = t
            gate.on_event(element("e1", "T", v=value), t)
        clock.advance_to(events[-1][0] + theta + 1)
        clock.drain()
        for t, _, elements in out.emissions:
            for el in elements:
                value = el.attribute("v").value
                assert t - arrival[value] <= theta, (value, t, arrival[value])
