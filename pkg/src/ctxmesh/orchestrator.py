"""Analytics-task orchestration over discovered streams.

A topology is a set of atomic tasks wired implicitly by entity types:
task outputs are republished to the broker and registered in discovery as
generated streams, so a downstream task whose input type matches binds to
them with no explicit edges. Placement prefers an edge worker whose
served scopes cover the task's input scope, falling back to the
least-loaded cloud worker (ties by worker id).

Operators are pure streaming functions; given one serialized input trace
their outputs are identical regardless of where the task runs.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from typing import Optional

from .clock import Clock
from .errors import (
    CtxMeshError,
    InvariantViolation,
    NoCapacity,
    TransportError,
    UnknownPath,
    UnsatisfiableInput,
)
from .model import (
    TIMESTAMP_META,
    ContextAttribute,
    ContextElement,
    EntityRef,
    Metadatum,
    Scope,
    scope_from_wire,
    scopes_from_wire,
    GeoBox,
    StringMatch,
)
from .network import NetworkHandle

log = logging.getLogger("ctxmesh.orchestrator")

STREAM_LEASE_MS = 10 ** 12


# ---------------------------------------------------------------------------
# operators
# ---------------------------------------------------------------------------

def _is_number(value) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _out_element(entity_id: str, output_type: str, attrs: list[tuple[str, str, object]],
                 t_ms: int) -> ContextElement:
    attributes = tuple(
        ContextAttribute(name, type_, value, (Metadatum(TIMESTAMP_META, "epoch_ms", t_ms),))
        for name, type_, value in attrs
    )
    return ContextElement(EntityRef(entity_id, output_type), attributes)


class Operator:
    """Deterministic streaming function bound to one task instance."""

    name = "operator"

    def __init__(self, params: dict, output_type: str):
        self.params = params
        self.output_type = output_type

    def process(self, element: ContextElement, t_ms: int) -> list[ContextElement]:
        raise NotImplementedError

    def reset(self):
        pass


class ThresholdDetect(Operator):
    """Emit one alarm per upward crossing of a value threshold.

    The alarm carries the crossing value and, when ``ratioScale`` is set,
    a clamped ``forecastRatio`` of value/ratioScale usable downstream.
    Re-arms when the value drops below the threshold.
    """

    name = "threshold_detect"

    def __init__(self, params: dict, output_type: str):
        super().__init__(params, output_type)
        self.attribute = params.get("attribute", "value")
        threshold = params.get("threshold")
        if not _is_number(threshold):
            raise InvariantViolation("params.threshold", "threshold_detect needs a numeric threshold")
        self.threshold = threshold
        self.ratio_scale = params.get("ratioScale")
        self._above: dict[tuple[str, str], bool] = {}

    def process(self, element: ContextElement, t_ms: int) -> list[ContextElement]:
        attr = element.attribute(self.attribute)
        if attr is None or not _is_number(attr.value):
            return []
        key = (element.entity.type, element.entity.id)
        was_above = self._above.get(key, False)
        is_above = attr.value >= self.threshold
        self._above[key] = is_above
        if not is_above or was_above:
            return []
        attrs = [("value", "number", attr.value)]
        if _is_number(self.ratio_scale) and self.ratio_scale > 0:
            ratio = min(max(attr.value / self.ratio_scale, 0.0), 1.0)
            attrs.append(("forecastRatio", "number", ratio))
        return [_out_element(element.entity.id, self.output_type, attrs, t_ms)]

    def reset(self):
        self._above.clear()


class WindowAvg(Operator):
    """Rolling mean of one attribute over a trailing time window."""

    name = "window_avg"

    def __init__(self, params: dict, output_type: str):
        super().__init__(params, output_type)
        self.attribute = params.get("attribute", "value")
        window = params.get("windowMs")
        if not isinstance(window, int) or isinstance(window, bool) or window <= 0:
            raise InvariantViolation("params.windowMs", "window_avg needs a positive windowMs")
        self.window_ms = window
        self.out_attribute = params.get("outputAttribute", self.attribute)
        self._samples: dict[tuple[str, str], list[tuple[int, float]]] = {}

    def process(self, element: ContextElement, t_ms: int) -> list[ContextElement]:
        attr = element.attribute(self.attribute)
        if attr is None or not _is_number(attr.value):
            return []
        key = (element.entity.type, element.entity.id)
        samples = self._samples.setdefault(key, [])
        samples.append((t_ms, float(attr.value)))
        cutoff = t_ms - self.window_ms
        self._samples[key] = samples = [(t, v) for t, v in samples if t > cutoff]
        mean = sum(v for _, v in samples) / len(samples)
        return [_out_element(element.entity.id, self.output_type,
                             [(self.out_attribute, "number", mean)], t_ms)]

    def reset(self):
        self._samples.clear()


class Setpoint(Operator):
    """Per-buffer fill target: clamp(capacity * (1 - forecast ratio), 0, capacity).

    Consumes two streams: buffer entities carrying a capacity, and
    forecast entities carrying a ratio in [0, 1]. A forecast update emits
    a target for every known buffer; a buffer update emits its own target
    once a forecast has been seen.
    """

    name = "setpoint"

    def __init__(self, params: dict, output_type: str):
        super().__init__(params, output_type)
        self.capacity_attribute = params.get("capacityAttribute", "capacity")
        self.ratio_attribute = params.get("ratioAttribute", "forecastRatio")
        self.target_attribute = params.get("targetAttribute", "fillTarget")
        self._ratio: Optional[float] = None
        self._buffers: dict[str, float] = {}

    def _target(self, buffer_id: str, t_ms: int) -> ContextElement:
        capacity = self._buffers[buffer_id]
        target = min(max(capacity * (1.0 - self._ratio), 0.0), capacity)
        return _out_element(buffer_id, self.output_type,
                            [(self.target_attribute, "number", target)], t_ms)

    def process(self, element: ContextElement, t_ms: int) -> list[ContextElement]:
        out = []
        ratio_attr = element.attribute(self.ratio_attribute)
        if ratio_attr is not None and _is_number(ratio_attr.value):
            self._ratio = float(ratio_attr.value)
            out.extend(self._target(bid, t_ms) for bid in self._buffers)
            return out
        capacity_attr = element.attribute(self.capacity_attribute)
        if capacity_attr is not None and _is_number(capacity_attr.value):
            self._buffers[element.entity.id] = float(capacity_attr.value)
            if self._ratio is not None:
                out.append(self._target(element.entity.id, t_ms))
        return out

    def reset(self):
        self._ratio = None
        self._buffers.clear()


OPERATORS: dict[str, type[Operator]] = {
    ThresholdDetect.name: ThresholdDetect,
    WindowAvg.name: WindowAvg,
    Setpoint.name: Setpoint,
}


# ---------------------------------------------------------------------------
# topology
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StreamSelector:
    entity_type: str
    scopes: tuple[Scope, ...] = ()
    shuffle_key: Optional[str] = None

    @classmethod
    def from_wire(cls, obj, where: str) -> "StreamSelector":
        if not isinstance(obj, dict) or not isinstance(obj.get("entityType"), str):
            raise InvariantViolation(where, f"{where} needs an entityType")
        return cls(
            obj["entityType"],
            scopes_from_wire(obj.get("scopes", []), f"{where}.scopes"),
            obj.get("shuffleKey"),
        )

    def to_wire(self) -> dict:
        wire = {"entityType": self.entity_type, "scopes": [s.to_wire() for s in self.scopes]}
        if self.shuffle_key is not None:
            wire["shuffleKey"] = self.shuffle_key
        return wire


@dataclass(frozen=True)
class TaskSpec:
    name: str
    operator: str
    inputs: tuple[StreamSelector, ...]
    output: str
    granularity: str = "single"
    params: dict = field(default_factory=dict)

    @classmethod
    def from_wire(cls, obj, where: str) -> "TaskSpec":
        if not isinstance(obj, dict):
            raise InvariantViolation(where, f"{where} must be an object")
        name = obj.get("name")
        operator = obj.get("operator")
        output = obj.get("output")
        if not name or not isinstance(name, str):
            raise InvariantViolation(f"{where}.name", "task needs a name")
        if operator not in OPERATORS:
            raise InvariantViolation(f"{where}.operator",
                                     f"unknown operator {operator!r} (have {sorted(OPERATORS)})")
        if not output or not isinstance(output, str):
            raise InvariantViolation(f"{where}.output", "task needs an output entity type")
        inputs = tuple(
            StreamSelector.from_wire(sel, f"{where}.inputs[{i}]")
            for i, sel in enumerate(obj.get("inputs", []))
        )
        if not inputs:
            raise InvariantViolation(f"{where}.inputs", "task needs at least one input")
        for sel in inputs:
            if sel.entity_type == output:
                raise InvariantViolation(f"{where}.output",
                                         f"task {name!r} loops on type {output!r}")
        granularity = obj.get("granularity", "single")
        if granularity not in ("single", "per_scope"):
            raise InvariantViolation(f"{where}.granularity",
                                     "granularity must be single or per_scope")
        params = obj.get("params", {})
        if not isinstance(params, dict):
            raise InvariantViolation(f"{where}.params", "params must be an object")
        return cls(name, operator, inputs, output, granularity, params)

    def to_wire(self) -> dict:
        return {
            "granularity": self.granularity,
            "inputs": [sel.to_wire() for sel in self.inputs],
            "name": self.name,
            "operator": self.operator,
            "output": self.output,
            "params": self.params,
        }


@dataclass(frozen=True)
class TaskTopology:
    name: str
    tasks: tuple[TaskSpec, ...]

    @classmethod
    def from_wire(cls, obj) -> "TaskTopology":
        if not isinstance(obj, dict) or not isinstance(obj.get("name"), str):
            raise InvariantViolation("topology.name", "topology needs a name")
        tasks = tuple(
            TaskSpec.from_wire(t, f"tasks[{i}]") for i, t in enumerate(obj.get("tasks", []))
        )
        names = [t.name for t in tasks]
        if len(set(names)) != len(names):
            raise InvariantViolation("tasks", "task names must be unique")
        topology = cls(obj["name"], tasks)
        topology._check_acyclic()
        return topology

    def _check_acyclic(self):
        # Edges: producer -> consumer when output type feeds an input type.
        consumers: dict[str, list[str]] = {}
        for task in self.tasks:
            for sel in task.inputs:
                consumers.setdefault(sel.entity_type, []).append(task.name)
        graph = {
            task.name: sorted(consumers.get(task.output, [])) for task in self.tasks
        }
        state: dict[str, int] = {}

        def visit(node: str):
            state[node] = 1
            for nxt in graph[node]:
                if state.get(nxt) == 1:
                    raise InvariantViolation("topology", f"cycle through task {nxt!r}")
                if nxt not in state:
                    visit(nxt)
            state[node] = 2

        for name in graph:
            if name not in state:
                visit(name)

    def output_types(self) -> set[str]:
        return {task.output for task in self.tasks}


@dataclass(frozen=True)
class WorkerInfo:
    id: str
    tier: str
    scopes: tuple[Scope, ...]
    capacity: int
    endpoint: str

    @classmethod
    def from_wire(cls, obj, where: str = "worker") -> "WorkerInfo":
        if not isinstance(obj, dict) or not isinstance(obj.get("id"), str):
            raise InvariantViolation(where, f"{where} needs an id")
        tier = obj.get("tier")
        if tier not in ("cloud", "edge"):
            raise InvariantViolation(f"{where}.tier", "tier must be cloud or edge")
        capacity = obj.get("capacity", 1)
        if not isinstance(capacity, int) or isinstance(capacity, bool) or capacity < 1:
            raise InvariantViolation(f"{where}.capacity", "capacity must be >= 1")
        return cls(
            obj["id"], tier,
            scopes_from_wire(obj.get("scopes", []), f"{where}.scopes"),
            capacity,
            obj.get("endpoint", ""),
        )


def _scope_covers(worker_scope: Scope, task_scope: Scope) -> bool:
    if isinstance(worker_scope, GeoBox) and isinstance(task_scope, GeoBox):
        return worker_scope.covers(task_scope)
    if isinstance(worker_scope, StringMatch) and isinstance(task_scope, StringMatch):
        return worker_scope.target == task_scope.target and \
            worker_scope.substring in task_scope.substring
    return False


def _worker_covers(worker: WorkerInfo, scopes: tuple[Scope, ...]) -> bool:
    return all(any(_scope_covers(ws, ts) for ws in worker.scopes) for ts in scopes)


@dataclass(frozen=True)
class TaskInstance:
    task: TaskSpec
    instance: str
    scope: Optional[Scope] = None

    def effective_inputs(self) -> tuple[StreamSelector, ...]:
        if self.scope is None:
            return self.task.inputs
        return tuple(
            StreamSelector(sel.entity_type, (self.scope,) if sel.scopes else (), sel.shuffle_key)
            for sel in self.task.inputs
        )

    def to_wire(self) -> dict:
        wire = {
            "inputs": [sel.to_wire() for sel in self.effective_inputs()],
            "instance": self.instance,
            "name": self.task.name,
            "operator": self.task.operator,
            "output": self.task.output,
            "params": self.task.params,
        }
        return wire


def expand_instances(topology: TaskTopology) -> list[TaskInstance]:
    instances = []
    for task in topology.tasks:
        scopes = [s for sel in task.inputs for s in sel.scopes]
        if task.granularity == "per_scope" and scopes:
            seen = []
            for scope in scopes:
                if scope not in seen:
                    seen.append(scope)
            for i, scope in enumerate(seen):
                instances.append(TaskInstance(task, f"{task.name}#{i}", scope))
        else:
            instances.append(TaskInstance(task, task.name))
    return instances


def plan_placement(topology: TaskTopology, workers: list[WorkerInfo]) -> list[dict]:
    """Assign every task instance to a worker; raises NoCapacity if impossible."""
    if not workers:
        raise NoCapacity("no workers configured")
    load = {w.id: 0 for w in workers}
    by_id = {w.id: w for w in workers}
    assignments = []
    for instance in expand_instances(topology):
        scopes = tuple(s for sel in instance.effective_inputs() for s in sel.scopes)
        edges = [
            w for w in workers
            if w.tier == "edge" and w.scopes and scopes and _worker_covers(w, scopes)
            and load[w.id] < w.capacity
        ]
        clouds = [w for w in workers if w.tier == "cloud" and load[w.id] < w.capacity]
        pool = edges or clouds
        if not pool:
            raise NoCapacity(f"no worker available for task instance {instance.instance!r}")
        chosen = min(pool, key=lambda w: (load[w.id], w.id))
        load[chosen.id] += 1
        assignments.append({
            "instance": instance.to_wire(),
            "worker": chosen.id,
            "endpoint": by_id[chosen.id].endpoint,
        })
    return assignments


# ---------------------------------------------------------------------------
# worker daemon
# ---------------------------------------------------------------------------

class TaskRunner:
    """Executes one task instance: binds inputs, runs the operator, publishes."""

    def __init__(self, worker: "Worker", instance_wire: dict, broker: str, discovery: str):
        self.worker = worker
        self.name = instance_wire["name"]
        self.instance = instance_wire["instance"]
        self.output_type = instance_wire["output"]
        operator_cls = OPERATORS.get(instance_wire.get("operator"))
        if operator_cls is None:
            raise InvariantViolation("operator", f"unknown operator {instance_wire.get('operator')!r}")
        self.operator = operator_cls(instance_wire.get("params", {}), self.output_type)
        self.inputs = [
            StreamSelector.from_wire(sel, f"inputs[{i}]")
            for i, sel in enumerate(instance_wire.get("inputs", []))
        ]
        self.broker = broker
        self.discovery = discovery
        # input index -> provider endpoint -> provider subscription id
        self.bindings: dict[int, dict[str, str]] = {i: {} for i in range(len(self.inputs))}
        self.reg_endpoints: dict[str, str] = {}
        self.avail_subs: dict[str, int] = {}  # availability sub id -> input index
        self.restarts = 0

    def _selector_body(self, sel: StreamSelector) -> dict:
        """Subscription-shaped body for one input selector."""
        return {
            "patterns": [{"id": ".*", "isPattern": True, "type": sel.entity_type}],
            "attributes": [],
            "scopes": [s.to_wire() for s in sel.scopes],
        }

    def _query_body(self, sel: StreamSelector) -> dict:
        return {
            "entities": [{"id": ".*", "isPattern": True, "type": sel.entity_type}],
            "attributes": [],
            "scopes": [s.to_wire() for s in sel.scopes],
        }

    def bind(self):
        net = self.worker.net
        for i, sel in enumerate(self.inputs):
            body = dict(self._selector_body(sel))
            body["notifyEndpoint"] = self.worker.endpoint
            body["expiresMs"] = self.worker.clock.now_ms() + STREAM_LEASE_MS
            try:
                response = net.request(self.discovery, "/v1/subscribeContextAvailability", body)
                self.avail_subs[response["id"]] = i
                self.worker.route_availability(response["id"], self)
            except (TransportError, CtxMeshError) as exc:
                log.warning("%s: availability bind pending for %s: %s",
                            self.instance, sel.entity_type, exc)
        self._register_output()

    def _register_output(self):
        body = {
            "patterns": [{"id": ".*", "isPattern": True, "type": self.output_type}],
            "attributes": [],
            "providingEndpoint": self.broker,
            "scopeMeta": [],
            "thingRefs": [],
            "expiresMs": self.worker.clock.now_ms() + STREAM_LEASE_MS,
        }
        try:
            self.worker.net.request(self.discovery, "/v1/registerContext", body)
        except (TransportError, CtxMeshError) as exc:
            log.warning("%s: output stream registration pending: %s", self.instance, exc)

    def on_availability(self, input_index: int, body: dict):
        sel = self.inputs[input_index]
        for reg in body.get("registrations", []):
            endpoint = reg.get("providingEndpoint", "")
            if reg.get("id"):
                self.reg_endpoints[reg["id"]] = endpoint
            if endpoint and endpoint not in self.bindings[input_index]:
                self._subscribe_stream(input_index, sel, endpoint)
        for reg_id in body.get("removed", []):
            endpoint = self.reg_endpoints.pop(reg_id, None)
            if endpoint and endpoint not in self.reg_endpoints.values():
                self.bindings[input_index].pop(endpoint, None)

    def _subscribe_stream(self, input_index: int, sel: StreamSelector, endpoint: str):
        body = dict(self._selector_body(sel))
        body.update({
            "notifyEndpoint": self.worker.endpoint,
            "throttlingMs": 0,
            "policy": {"kind": "drop"},
            "expiresMs": self.worker.clock.now_ms() + STREAM_LEASE_MS,
        })
        try:
            response = self.worker.net.request(endpoint, "/v1/subscribeContext", body)
        except (TransportError, CtxMeshError) as exc:
            log.warning("%s: stream subscribe at %s failed: %s", self.instance, endpoint, exc)
            return
        sub_id = response["id"]
        self.bindings[input_index][endpoint] = sub_id
        self.worker.route_data(sub_id, self)

    def on_elements(self, elements: list[ContextElement], now_ms: int):
        for element in elements:
            ts = None
            for attr in element.attributes:
                ts = attr.timestamp_ms()
                if ts is not None:
                    break
            try:
                outputs = self.operator.process(element, ts if ts is not None else now_ms)
            except Exception:
                log.exception("%s: operator failed; restarting", self.instance)
                self.restarts += 1
                self.operator.reset()
                outputs = self._replay_latest(now_ms)
            if outputs:
                self._publish(outputs)

    def _replay_latest(self, now_ms: int) -> list[ContextElement]:
        """After a restart, re-prime the operator from the broker's latest view."""
        outputs = []
        for sel in self.inputs:
            try:
                response = self.worker.net.request(self.broker, "/v1/queryContext",
                                                   self._query_body(sel))
            except (TransportError, CtxMeshError):
                continue
            for raw in response.get("elements", []):
                element = ContextElement.from_wire(raw)
                try:
                    outputs.extend(self.operator.process(element, now_ms))
                except Exception:
                    log.exception("%s: operator failed during replay", self.instance)
        return outputs

    def _publish(self, outputs: list[ContextElement]):
        body = {"elements": [e.to_wire() for e in outputs]}
        try:
            self.worker.net.request(self.broker, "/v1/updateContext", body)
        except (TransportError, CtxMeshError) as exc:
            log.warning("%s: output publish failed: %s", self.instance, exc)

    def bindings_wire(self) -> list[dict]:
        return [
            {
                "endpoints": sorted(self.bindings[i]),
                "input": sel.entity_type,
                "instance": self.instance,
                "task": self.name,
            }
            for i, sel in enumerate(self.inputs)
        ]


class Worker:
    """Worker daemon hosting task runners; tasks only talk via the wire."""

    def __init__(self, node_id: str, endpoint: str, tier: str, scopes: tuple[Scope, ...],
                 capacity: int, clock: Clock, net: NetworkHandle):
        self.node_id = node_id
        self.endpoint = endpoint
        self.tier = tier
        self.scopes = scopes
        self.capacity = capacity
        self.clock = clock
        self.net = net
        self._runners: dict[str, TaskRunner] = {}
        self._data_routes: dict[str, TaskRunner] = {}
        self._avail_routes: dict[str, TaskRunner] = {}
        self._lock = threading.RLock()

    def handle(self, path: str, body: dict, headers: dict[str, str]) -> dict:
        if path == "/v1/assignTask":
            return self.assign(body)
        if path == "/v1/notify":
            return self._on_notify(body)
        if path == "/v1/bindings":
            return self.bindings_wire()
        if path == "/v1/status":
            with self._lock:
                return {
                    "capacity": self.capacity,
                    "kind": "worker",
                    "nodeId": self.node_id,
                    "tasks": sorted(self._runners),
                    "tier": self.tier,
                }
        raise UnknownPath(path)

    def assign(self, body: dict) -> dict:
        if not isinstance(body, dict) or not isinstance(body.get("instance"), dict):
            raise InvariantViolation("instance", "assignment must carry a task instance")
        broker = body.get("broker")
        discovery = body.get("discovery")
        if not broker or not discovery:
            raise InvariantViolation("assignment", "assignment needs broker and discovery URLs")
        with self._lock:
            if len(self._runners) >= self.capacity:
                raise NoCapacity(f"worker {self.node_id} is at capacity {self.capacity}")
            runner = TaskRunner(self, body["instance"], broker, discovery)
            self._runners[runner.instance] = runner
        runner.bind()
        return {"ok": True, "instance": runner.instance}

    def route_data(self, sub_id: str, runner: TaskRunner):
        with self._lock:
            self._data_routes[sub_id] = runner

    def route_availability(self, sub_id: str, runner: TaskRunner):
        with self._lock:
            self._avail_routes[sub_id] = runner

    def _on_notify(self, body: dict) -> dict:
        sub_id = body.get("subscriptionId", "")
        if "registrations" in body or "removed" in body:
            with self._lock:
                runner = self._avail_routes.get(sub_id)
            if runner is not None:
                runner.on_availability(runner.avail_subs[sub_id], body)
            return {"ok": True}
        with self._lock:
            runner = self._data_routes.get(sub_id)
        if runner is not None:
            elements = [
                ContextElement.from_wire(raw, f"elements[{i}]")
                for i, raw in enumerate(body.get("elements", []))
            ]
            runner.on_elements(elements, self.clock.now_ms())
        return {"ok": True}

    def bindings_wire(self) -> dict:
        with self._lock:
            bindings = []
            for instance in sorted(self._runners):
                bindings.extend(self._runners[instance].bindings_wire())
            return {"bindings": bindings}


# ---------------------------------------------------------------------------
# orchestrator
# ---------------------------------------------------------------------------

class Orchestrator:
    """Plans topologies onto workers and dispatches task assignments."""

    def __init__(self, node_id: str, clock: Clock, net: NetworkHandle,
                 broker: str, discovery: str):
        self.node_id = node_id
        self._clock = clock
        self._net = net
        self.broker = broker
        self.discovery = discovery
        self._plans: dict[str, list[dict]] = {}

    def handle(self, path: str, body: dict, headers: dict[str, str]) -> dict:
        if path == "/v1/submitTopology":
            return self.submit_wire(body)
        if path == "/v1/plans":
            return {"plans": self._plans}
        if path == "/v1/status":
            return {"kind": "orchestrator", "nodeId": self.node_id,
                    "topologies": sorted(self._plans)}
        raise UnknownPath(path)

    def submit_wire(self, body: dict) -> dict:
        if not isinstance(body, dict):
            raise InvariantViolation("body", "submit body must be an object")
        topology = TaskTopology.from_wire(body.get("topology", {}))
        workers = [
            WorkerInfo.from_wire(w, f"workers[{i}]")
            for i, w in enumerate(body.get("workers", []))
        ]
        assignments = self.submit(topology, workers)
        return {"assignments": assignments, "topology": topology.name}

    def submit(self, topology: TaskTopology, workers: list[WorkerInfo]) -> list[dict]:
        self._check_inputs_satisfiable(topology)
        assignments = plan_placement(topology, workers)
        for assignment in assignments:
            endpoint = assignment["endpoint"]
            if not endpoint:
                raise InvariantViolation("workers", f"worker {assignment['worker']} has no endpoint")
            self._net.request(endpoint, "/v1/assignTask", {
                "instance": assignment["instance"],
                "broker": self.broker,
                "discovery": self.discovery,
            })
        self._plans[topology.name] = assignments
        return assignments

    def _check_inputs_satisfiable(self, topology: TaskTopology):
        produced = topology.output_types()
        for task in topology.tasks:
            for sel in task.inputs:
                if sel.entity_type in produced:
                    continue
                found = self._net.request(self.discovery, "/v1/discoverContextAvailability", {
                    "entities": [{"id": ".*", "isPattern": True, "type": sel.entity_type}],
                    "attributes": [],
                    "scopes": [],
                })
                if not found.get("registrations"):
                    raise UnsatisfiableInput(
                        f"task {task.name!r}: no source for input type {sel.entity_type!r}"
                    )
