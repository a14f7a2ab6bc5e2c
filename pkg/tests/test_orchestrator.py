"""Orchestrator: topology validation, placement, operators, stream binding."""

from __future__ import annotations

import pytest

from ctxmesh.errors import InvariantViolation, NoCapacity, UnsatisfiableInput
from ctxmesh.model import scope_from_wire
from ctxmesh.orchestrator import (
    Orchestrator,
    Setpoint,
    TaskTopology,
    ThresholdDetect,
    WindowAvg,
    Worker,
    WorkerInfo,
    plan_placement,
)

from conftest import Rig, element, values_of

BOX = {"kind": "geo_box", "minLat": 0, "minLon": 0, "maxLat": 10, "maxLon": 10}


def topology_wire(tasks):
    return {"name": "t", "tasks": tasks}


def simple_task(name="t1", operator="threshold_detect", inputs=("In",), output="Out",
                **extra):
    spec = {
        "name": name,
        "operator": operator,
        "params": {"attribute": "v", "threshold": 10},
        "inputs": [{"entityType": t} for t in inputs],
        "output": output,
    }
    spec.update(extra)
    return spec


def worker_wire(id_, tier="cloud", scopes=(), capacity=4, endpoint=""):
    return {"id": id_, "tier": tier, "scopes": list(scopes), "capacity": capacity,
            "endpoint": endpoint or f"mem://{id_}"}


# -- topology validation ---------------------------------------------------------

def test_unknown_operator_rejected():
    with pytest.raises(InvariantViolation):
        TaskTopology.from_wire(topology_wire([simple_task(operator="bogus")]))


def test_self_loop_rejected():
    with pytest.raises(InvariantViolation):
        TaskTopology.from_wire(topology_wire([simple_task(inputs=("Out",), output="Out")]))


def test_cycle_rejected():
    tasks = [simple_task("a", inputs=("TypeB",), output="TypeA"),
             simple_task("b", inputs=("TypeA",), output="TypeB")]
    with pytest.raises(InvariantViolation):
        TaskTopology.from_wire(topology_wire(tasks))


def test_chain_is_acyclic():
    tasks = [simple_task("a", inputs=("Raw",), output="Mid"),
             simple_task("b", inputs=("Mid",), output="Final")]
    topology = TaskTopology.from_wire(topology_wire(tasks))
    assert topology.output_types() == {"Mid", "Final"}


# -- placement ---------------------------------------------------------------------

def test_single_cloud_worker_gets_the_task():
    topology = TaskTopology.from_wire(topology_wire([simple_task()]))
    plan = plan_placement(topology, [WorkerInfo.from_wire(worker_wire("w1"))])
    assert [a["worker"] for a in plan] == ["w1"]


def test_edge_with_covering_scope_beats_cloud():
    task = simple_task()
    task["inputs"] = [{"entityType": "In", "scopes": [BOX]}]
    topology = TaskTopology.from_wire(topology_wire([task]))
    workers = [WorkerInfo.from_wire(worker_wire("zz-cloud")),
               WorkerInfo.from_wire(worker_wire("aa-edge", tier="edge", scopes=[BOX]))]
    plan = plan_placement(topology, workers)
    assert [a["worker"] for a in plan] == ["aa-edge"]


def test_edge_without_covering_scope_loses():
    far = {"kind": "geo_box", "minLat": 50, "minLon": 50, "maxLat": 60, "maxLon": 60}
    task = simple_task()
    task["inputs"] = [{"entityType": "In", "scopes": [BOX]}]
    topology = TaskTopology.from_wire(topology_wire([task]))
    workers = [WorkerInfo.from_wire(worker_wire("cloud")),
               WorkerInfo.from_wire(worker_wire("edge", tier="edge", scopes=[far]))]
    plan = plan_placement(topology, workers)
    assert [a["worker"] for a in plan] == ["cloud"]


def test_tie_break_by_worker_id():
    topology = TaskTopology.from_wire(topology_wire([simple_task()]))
    workers = [WorkerInfo.from_wire(worker_wire("w2")),
               WorkerInfo.from_wire(worker_wire("w1"))]
    plan = plan_placement(topology, workers)
    assert [a["worker"] for a in plan] == ["w1"]


def test_least_loaded_first_and_capacity():
    tasks = [simple_task(f"t{i}", inputs=("In",), output=f"Out{i}") for i in range(3)]
    topology = TaskTopology.from_wire(topology_wire(tasks))
    workers = [WorkerInfo.from_wire(worker_wire("w1", capacity=2)),
               WorkerInfo.from_wire(worker_wire("w2", capacity=1))]
    plan = plan_placement(topology, workers)
    assert [a["worker"] for a in plan] == ["w1", "w2", "w1"]
    with pytest.raises(NoCapacity):
        plan_placement(TaskTopology.from_wire(topology_wire(
            [simple_task(f"t{i}", output=f"O{i}") for i in range(4)])), workers)


def test_per_scope_granularity_expands_instances():
    other = {"kind": "geo_box", "minLat": 20, "minLon": 20, "maxLat": 30, "maxLon": 30}
    task = simple_task(granularity="per_scope")
    task["inputs"] = [{"entityType": "In", "scopes": [BOX, other]}]
    topology = TaskTopology.from_wire(topology_wire([task]))
    plan = plan_placement(topology, [WorkerInfo.from_wire(worker_wire("w1"))])
    assert [a["instance"]["instance"] for a in plan] == ["t1#0", "t1#1"]


# -- operators ----------------------------------------------------------------------

def test_threshold_single_crossing():
    op = ThresholdDetect({"attribute": "precip", "threshold": 10}, "Alarm")
    out = []
    for i, v in enumerate((5, 12)):
        out.extend(op.process(element("g", "Rain", precip=v), i))
    assert len(out) == 1
    assert out[0].attribute("value").value == 12


def test_threshold_resets_below():
    op = ThresholdDetect({"attribute": "precip", "threshold": 10}, "Alarm")
    values = []
    for i, v in enumerate((5, 12, 13, 4, 11)):
        for e in op.process(element("g", "Rain", precip=v), i):
            values.append(e.attribute("value").value)
    assert values == [12, 11]


def test_threshold_ratio_clamped():
    op = ThresholdDetect({"attribute": "precip", "threshold": 10, "ratioScale": 16}, "Alarm")
    out = op.process(element("g", "Rain", precip=40), 0)
    assert out[0].attribute("forecastRatio").value == 1.0


def test_window_avg():
    op = WindowAvg({"attribute": "v", "windowMs": 100}, "Mean")
    first = op.process(element("e", "T", v=10), 0)
    assert first[0].attribute("v").value == 10.0
    second = op.process(element("e", "T", v=20), 50)
    assert second[0].attribute("v").value == 15.0
    third = op.process(element("e", "T", v=30), 200)  # earlier samples expired
    assert third[0].attribute("v").value == 30.0


def test_setpoint_formula_and_fanout():
    op = Setpoint({}, "Setpoint")
    assert op.process(element("buf-1", "WaterBuffer", capacity=100), 0) == []
    out = op.process(element("f", "Forecast", forecastRatio=0.25), 1)
    assert [(e.entity.id, e.attribute("fillTarget").value) for e in out] == [("buf-1", 75.0)]
    out = op.process(element("buf-2", "WaterBuffer", capacity=40), 2)
    assert [(e.entity.id, e.attribute("fillTarget").value) for e in out] == [("buf-2", 30.0)]
    # Ratio above 1 clamps the target at zero.
    out = op.process(element("f", "Forecast", forecastRatio=1.5), 3)
    assert [e.attribute("fillTarget").value for e in out] == [0.0, 0.0]


# -- end-to-end binding ---------------------------------------------------------------

def deploy(rig: Rig):
    rig.broker("b1")
    rig.discovery("d1")
    worker = Worker("w1", "mem://w1", "cloud", (), 4, rig.clock, rig.net.for_node("w1"))
    rig.net.register("w1", worker)
    orc = Orchestrator("orc", rig.clock, rig.net.for_node("orc"), "mem://b1", "mem://d1")
    rig.net.register("orc", orc)
    rig.post("d1", "/v1/registerContext", {
        "patterns": [{"id": ".*", "isPattern": True, "type": "Rain"}],
        "attributes": [], "providingEndpoint": "mem://b1",
        "scopeMeta": [], "thingRefs": [], "expiresMs": 10 ** 9})
    return worker, orc


def test_unsatisfiable_input_rejected(rig: Rig):
    deploy(rig)
    missing = topology_wire([simple_task(inputs=("NeverSeen",))])
    with pytest.raises(UnsatisfiableInput):
        rig.post("orc", "/v1/submitTopology",
                 {"topology": missing, "workers": [worker_wire("w1")]})


def test_chained_tasks_bind_through_generated_streams(rig: Rig):
    worker, _ = deploy(rig)
    sink = rig.sink("consumer")
    topology = topology_wire([
        {"name": "detect", "operator": "threshold_detect",
         "params": {"attribute": "precip", "threshold": 10, "ratioScale": 16},
         "inputs": [{"entityType": "Rain"}], "output": "Forecast"},
        {"name": "plan", "operator": "setpoint",
         "params": {}, "inputs": [{"entityType": "Forecast"},
                                  {"entityType": "Buffers"}],
         "output": "Setpoint"},
    ])
    rig.post("d1", "/v1/registerContext", {
        "patterns": [{"id": ".*", "isPattern": True, "type": "Buffers"}],
        "attributes": [], "providingEndpoint": "mem://b1",
        "scopeMeta": [], "thingRefs": [], "expiresMs": 10 ** 9})
    rig.post("orc", "/v1/submitTopology",
             {"topology": topology, "workers": [worker_wire("w1")]})
    rig.drain()
    rig.post("b1", "/v1/subscribeContext", {
        "patterns": [{"id": ".*", "isPattern": True, "type": "Setpoint"}],
        "notifyEndpoint": "mem://consumer", "expiresMs": 10 ** 9})
    rig.drain()
    rig.post("b1", "/v1/updateContext",
             {"elements": [element("buf-1", "Buffers", ts=1, capacity=100).to_wire()]})
    rig.post("b1", "/v1/updateContext",
             {"elements": [element("g1", "Rain", ts=2, precip=12).to_wire()]})
    rig.drain()
    # 12/16 = 0.75 ratio -> target 25.0
    assert values_of(sink.notes, "fillTarget") == [25.0]
    bindings = rig.post("w1", "/v1/bindings", {})["bindings"]
    by_input = {(b["task"], b["input"]): b["endpoints"] for b in bindings}
    assert by_input[("detect", "Rain")] == ["mem://b1"]
    assert by_input[("plan", "Forecast")] == ["mem://b1"]


def test_late_registered_stream_binds_dynamically(rig: Rig):
    worker, _ = deploy(rig)
    topology = topology_wire([
        {"name": "detect", "operator": "threshold_detect",
         "params": {"attribute": "precip", "threshold": 10},
         "inputs": [{"entityType": "Rain"}], "output": "Forecast"}])
    rig.post("orc", "/v1/submitTopology",
             {"topology": topology, "workers": [worker_wire("w1")]})
    rig.drain()
    rig.broker("b2")
    rig.post("d1", "/v1/registerContext", {
        "patterns": [{"id": ".*", "isPattern": True, "type": "Rain"}],
        "attributes": [], "providingEndpoint": "mem://b2",
        "scopeMeta": [], "thingRefs": [], "expiresMs": 10 ** 9})
    rig.drain()
    bindings = rig.post("w1", "/v1/bindings", {})["bindings"]
    rain = next(b for b in bindings if b["input"] == "Rain")
    assert rain["endpoints"] == ["mem://b1", "mem://b2"]
    rig.post("b2", "/v1/updateContext",
             {"elements": [element("g2", "Rain", ts=5, precip=20).to_wire()]})
    rig.drain()
    out = rig.post("b1", "/v1/queryContext",
                   {"entities": [{"id": "g2", "isPattern": False, "type": "Forecast"}]})
    assert len(out["elements"]) == 1


def test_binding_completeness_against_bruteforce_scan(rig: Rig):
    worker, _ = deploy(rig)
    for name in ("b2", "b3"):
        rig.broker(name)
        rig.post("d1", "/v1/registerContext", {
            "patterns": [{"id": ".*", "isPattern": True, "type": "Rain"}],
            "attributes": [], "providingEndpoint": f"mem://{name}",
            "scopeMeta": [], "thingRefs": [], "expiresMs": 10 ** 9})
    topology = topology_wire([
        {"name": "detect", "operator": "threshold_detect",
         "params": {"attribute": "precip", "threshold": 10},
         "inputs": [{"entityType": "Rain"}], "output": "Forecast"}])
    rig.post("orc", "/v1/submitTopology",
             {"topology": topology, "workers": [worker_wire("w1")]})
    rig.drain()
    # Brute force: every registration endpoint currently matching the input.
    regs = rig.post("d1", "/v1/discoverContextAvailability", {
        "entities": [{"id": ".*", "isPattern": True, "type": "Rain"}],
        "attributes": [], "scopes": []})["registrations"]
    expected = sorted({r["providingEndpoint"] for r in regs})
    bindings = rig.post("w1", "/v1/bindings", {})["bindings"]
    rain = next(b for b in bindings if b["input"] == "Rain")
    assert rain["endpoints"] == expected


def test_worker_capacity_guard(rig: Rig):
    worker = Worker("w1", "mem://w1", "cloud", (), 1, rig.clock, rig.net.for_node("w1"))
    rig.net.register("w1", worker)
    rig.broker("b1")
    rig.discovery("d1")
    assignment = {
        "instance": {"name": "t", "instance": "t", "operator": "window_avg",
                     "params": {"attribute": "v", "windowMs": 10},
                     "inputs": [{"entityType": "In"}], "output": "Out"},
        "broker": "mem://b1", "discovery": "mem://d1"}
    rig.post("w1", "/v1/assignTask", assignment)
    with pytest.raises(NoCapacity):
        rig.post("w1", "/v1/assignTask",
                 {**assignment, "instance": {**assignment["instance"], "instance": "t2"}})


def test_operator_restart_after_exception(rig: Rig):
    worker, _ = deploy(rig)
    topology = topology_wire([
        {"name": "detect", "operator": "threshold_detect",
         "params": {"attribute": "precip", "threshold": 10},
         "inputs": [{"entityType": "Rain"}], "output": "Forecast"}])
    rig.post("orc", "/v1/submitTopology",
             {"topology": topology, "workers": [worker_wire("w1")]})
    rig.drain()
    runner = worker._runners["detect"]
    calls = {"n": 0}
    original = runner.operator.process

    def explode_once(element, t_ms):
        if calls["n"] == 0:
            calls["n"] += 1
            raise RuntimeError("boom")
        return original(element, t_ms)

    runner.operator.process = explode_once
    rig.post("b1", "/v1/updateContext",
             {"elements": [element("g1", "Rain", ts=1, precip=15).to_wire()]})
    rig.drain()
    assert runner.restarts == 1
    # Replay from the broker's latest values re-primed the operator.
    out = rig.post("b1", "/v1/queryContext",
                   {"entities": [{"id": "g1", "isPattern": False, "type": "Forecast"}]})
    assert len(out["elements"]) == 1
