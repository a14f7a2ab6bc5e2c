"""Scenario scripts: boot a multi-node topology in one process and replay
timed actions against it under a simulated clock.

A script is a JSON document with a ``nodes`` list and a timed ``actions``
list (nondecreasing ``t``). Every action goes through the public wire
surface of the target node; assertions inspect queries, sink deliveries,
history contents, and worker bindings. Runs are deterministic: two runs
of the same script produce identical event logs.
"""

from __future__ import annotations

import json
import tempfile
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from ..agent import Agent, DeviceMapping
from ..broker import Broker
from ..clock import SimClock
from ..discovery import Discovery
from ..errors import CtxMeshError, ScriptError, TransportError
from ..federation import FederationNode
from ..history import HistoryNode, SegmentStore
from ..model import builtin_models, canonical_dumps, load_models_dir
from ..network import InMemoryNetwork
from ..orchestrator import Orchestrator, Worker, WorkerInfo
from ..model import scopes_from_wire
from .sink import RecorderNode

NODE_KINDS = ("broker", "discovery", "federation", "history", "agent",
              "worker", "orchestrator", "sink")
ACTION_KINDS = ("publish", "device", "register", "subscribe", "subscribe-availability",
                "unsubscribe", "query", "attach", "submit", "partition", "advance", "assert")
ASSERT_KINDS = ("notification", "query-result", "history", "binding")


@dataclass
class AssertionResult:
    description: str
    passed: bool
    detail: str = ""

    def to_wire(self) -> dict:
        return {"description": self.description, "detail": self.detail, "passed": self.passed}


@dataclass
class RunReport:
    name: str
    assertions: list[AssertionResult] = field(default_factory=list)
    event_log: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(a.passed for a in self.assertions)

    def to_wire(self) -> dict:
        return {
            "assertions": [a.to_wire() for a in self.assertions],
            "eventLog": self.event_log,
            "name": self.name,
            "passed": self.passed,
        }

    def text(self) -> str:
        lines = [f"scenario {self.name}: {'PASS' if self.passed else 'FAIL'}"]
        for a in self.assertions:
            status = "pass" if a.passed else "FAIL"
            suffix = f" ({a.detail})" if a.detail and not a.passed else ""
            lines.append(f"  [{status}] {a.description}{suffix}")
        return "\n".join(lines)


def load_bundled_script(name: str) -> dict:
    from importlib import resources

    filename = name if name.endswith(".json") else f"{name}.json"
    entry = resources.files("ctxmesh.harness.scenarios") / filename
    return json.loads(entry.read_bytes())


def load_script_file(path: str | Path) -> dict:
    text = Path(path).read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScriptError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc


class ScenarioRunner:
    """Executes one script; use :func:`run_scenario` for the common path."""

    def __init__(self, script: dict, data_dir: Optional[str] = None):
        self.script = script
        self.name = script.get("name", "scenario")
        self.clock = SimClock()
        self.network = InMemoryNetwork(self.clock, on_message=self._log_message)
        self.report = RunReport(self.name)
        self.nodes: dict[str, object] = {}
        self.kinds: dict[str, str] = {}
        self.saved: dict[str, str] = {}
        self._data_dir = Path(data_dir) if data_dir else Path(tempfile.mkdtemp(prefix="ctxmesh-"))
        self._validate()
        self._build_nodes()

    # -- validation ------------------------------------------------------------

    def _validate(self):
        if not isinstance(self.script, dict):
            raise ScriptError("script must be a JSON object")
        nodes = self.script.get("nodes", [])
        if not isinstance(nodes, list):
            raise ScriptError("nodes must be a list")
        names = set()
        for i, decl in enumerate(nodes):
            where = f"nodes[{i}]"
            if not isinstance(decl, dict) or not isinstance(decl.get("name"), str):
                raise ScriptError(f"{where}: node needs a name")
            if decl.get("kind") not in NODE_KINDS:
                raise ScriptError(f"{where}: unknown kind {decl.get('kind')!r}")
            if decl["name"] in names:
                raise ScriptError(f"{where}: duplicate node name {decl['name']!r}")
            names.add(decl["name"])
        actions = self.script.get("actions", [])
        if not isinstance(actions, list):
            raise ScriptError("actions must be a list")
        last_t = 0
        for i, action in enumerate(actions):
            where = f"actions[{i}]"
            if not isinstance(action, dict):
                raise ScriptError(f"{where}: action must be an object")
            kind = action.get("action")
            if kind not in ACTION_KINDS:
                raise ScriptError(f"{where}: unknown action {kind!r}")
            t = action.get("t", last_t)
            if not isinstance(t, int) or isinstance(t, bool) or t < last_t:
                raise ScriptError(f"{where}: t must be an integer >= previous action time")
            last_t = t
            if kind == "assert" and action.get("kind") not in ASSERT_KINDS:
                raise ScriptError(f"{where}: unknown assertion kind {action.get('kind')!r}")
            node_ref = action.get("node")
            if node_ref is not None and node_ref not in names:
                raise ScriptError(f"{where}: undeclared node {node_ref!r}")
            if kind == "partition":
                for name in action.get("nodes", []):
                    if name not in names:
                        raise ScriptError(f"{where}: undeclared node {name!r}")

    # -- construction ----------------------------------------------------------

    def _endpoint(self, name: str) -> str:
        return f"mem://{name}"

    def _models_for(self, decl: dict) -> dict:
        source = decl.get("models")
        if source is None:
            return {}
        if source == "builtin":
            return builtin_models()
        if isinstance(source, str):
            return load_models_dir(source)
        if isinstance(source, list):
            available = builtin_models()
            return {name: available[name] for name in source}
        raise ScriptError(f"node {decl.get('name')}: bad models declaration")

    def _build_nodes(self):
        for decl in self.script.get("nodes", []):
            name, kind = decl["name"], decl["kind"]
            endpoint = self._endpoint(name)
            net = self.network.for_node(name)
            if kind == "broker":
                node = Broker(name, endpoint, self.clock, net, models=self._models_for(decl))
            elif kind == "discovery":
                node = Discovery(name, endpoint, self.clock, net)
            elif kind == "federation":
                node = FederationNode(
                    name, endpoint, decl.get("level", 3),
                    self._endpoint(decl["broker"]), self._endpoint(decl["discovery"]),
                    self.clock, net,
                    parent_discovery=(self._endpoint(decl["parentDiscovery"])
                                      if decl.get("parentDiscovery") else None),
                    lease_ms=decl.get("leaseMs", 30_000),
                )
            elif kind == "history":
                store = SegmentStore(self._data_dir / name, max_bytes=decl.get("maxBytes"))
                node = HistoryNode(name, self.clock, store)
            elif kind == "agent":
                models = self._models_for(decl) or builtin_models()
                mapping = DeviceMapping.from_wire(decl.get("mapping", {"devices": {}}), models)
                node = Agent(name, self.clock, net, mapping, models,
                             self._endpoint(decl["broker"]),
                             queue_limit=decl.get("queueLimit", 10_000))
            elif kind == "worker":
                node = Worker(name, endpoint, decl.get("tier", "cloud"),
                              scopes_from_wire(decl.get("scopes", []), "scopes"),
                              decl.get("capacity", 4), self.clock, net)
            elif kind == "orchestrator":
                node = Orchestrator(name, self.clock, net,
                                    self._endpoint(decl["broker"]),
                                    self._endpoint(decl["discovery"]))
            else:
                node = RecorderNode(name, self.clock, on_record=self._log_sink(name))
            self.network.register(name, node)
            self.nodes[name] = node
            self.kinds[name] = kind

    # -- logging ---------------------------------------------------------------

    def _log(self, entry: str):
        self.report.event_log.append(entry)

    def _log_message(self, t: int, src: str, dst: str, path: str):
        self._log(f"{t} post {src} -> {dst} {path}")

    def _log_sink(self, name: str):
        def record(t: int, body: dict):
            self._log(f"{t} sink {name} {canonical_dumps(body).decode()}")

        return record

    # -- execution ---------------------------------------------------------------

    def run(self) -> RunReport:
        client = self.network.for_node("scenario")
        for i, action in enumerate(self.script.get("actions", [])):
            t = action.get("t", self.clock.now_ms())
            self.clock.advance_to(max(t, self.clock.now_ms()))
            self.clock.drain()
            kind = action["action"]
            self._log(f"{t} action {kind}" + (f" node={action['node']}" if "node" in action else ""))
            try:
                self._execute(client, action, i)
            except (CtxMeshError, TransportError) as exc:
                if kind == "assert":
                    raise
                self._log(f"{t} error actions[{i}]: {exc}")
            self.clock.drain()
        return self.report

    def _resolve_id(self, action: dict) -> str:
        if "saved" in action:
            key = action["saved"]
            if key not in self.saved:
                raise ScriptError(f"no saved id {key!r}")
            return self.saved[key]
        return action.get("id", "")

    def _execute(self, client, action: dict, index: int):
        kind = action["action"]
        node = action.get("node")
        endpoint = self._endpoint(node) if node else None
        if kind == "advance":
            return
        if kind == "partition":
            until = self.clock.now_ms() + action.get("durationMs", 0)
            self.network.partition(action.get("nodes", []), until)
            return
        if kind == "publish":
            client.request(endpoint, "/v1/updateContext", {"elements": action.get("elements", [])})
            return
        if kind == "device":
            client.request(endpoint, "/v1/device", action.get("message", {}))
            return
        if kind == "register":
            response = client.request(endpoint, "/v1/registerContext",
                                      action.get("registration", {}))
            if "save" in action:
                self.saved[action["save"]] = response["id"]
            return
        if kind == "subscribe":
            response = client.request(endpoint, "/v1/subscribeContext",
                                      action.get("subscription", {}))
            if "save" in action:
                self.saved[action["save"]] = response["id"]
            return
        if kind == "subscribe-availability":
            response = client.request(endpoint, "/v1/subscribeContextAvailability",
                                      action.get("subscription", {}))
            if "save" in action:
                self.saved[action["save"]] = response["id"]
            return
        if kind == "unsubscribe":
            path = ("/v1/unsubscribeContextAvailability"
                    if self.kinds.get(node) == "discovery" else "/v1/unsubscribeContext")
            client.request(endpoint, path, {"id": self._resolve_id(action)})
            return
        if kind == "query":
            response = client.request(endpoint, "/v1/queryContext", action.get("query", {}))
            self._log(f"{self.clock.now_ms()} query {node} -> "
                      f"{canonical_dumps(response).decode()}")
            return
        if kind == "attach":
            client.request(endpoint, "/v1/attachParent",
                           {"parentDiscovery": action["parentDiscovery"]})
            return
        if kind == "submit":
            workers = []
            for ref in action.get("workers", []):
                if isinstance(ref, str):
                    worker = self.nodes.get(ref)
                    if not isinstance(worker, Worker):
                        raise ScriptError(f"actions[{index}]: {ref!r} is not a worker node")
                    workers.append({
                        "id": worker.node_id,
                        "tier": worker.tier,
                        "scopes": [s.to_wire() for s in worker.scopes],
                        "capacity": worker.capacity,
                        "endpoint": worker.endpoint,
                    })
                else:
                    workers.append(ref)
            response = client.request(endpoint, "/v1/submitTopology",
                                      {"topology": action.get("topology", {}),
                                       "workers": workers})
            self._log(f"{self.clock.now_ms()} plan {canonical_dumps(response).decode()}")
            return
        if kind == "assert":
            self._evaluate_assertion(client, action)
            return
        raise ScriptError(f"actions[{index}]: unhandled action {kind!r}")

    # -- assertions --------------------------------------------------------------

    def _check(self, description: str, passed: bool, detail: str = ""):
        self.report.assertions.append(AssertionResult(description, passed, detail))
        self._log(f"{self.clock.now_ms()} assert {'pass' if passed else 'FAIL'} {description}")

    def _evaluate_assertion(self, client, action: dict):
        kind = action["kind"]
        describe = action.get("describe", kind)
        if kind == "notification":
            self._assert_notification(action, describe)
        elif kind == "query-result":
            self._assert_query(client, action, describe)
        elif kind == "history":
            self._assert_history(client, action, describe)
        elif kind == "binding":
            self._assert_binding(client, action, describe)

    def _assert_notification(self, action: dict, describe: str):
        sink = self.nodes.get(action.get("sink"))
        if not isinstance(sink, RecorderNode):
            self._check(describe, False, f"{action.get('sink')!r} is not a sink")
            return
        sub_id = self.saved.get(action["subscription"]) if "subscription" in action else None
        notes = sink.notifications(sub_id)
        expect = action.get("expect", {})
        failures = []
        if "count" in expect and len(notes) != expect["count"]:
            failures.append(f"count {len(notes)} != {expect['count']}")
        if "minCount" in expect and len(notes) < expect["minCount"]:
            failures.append(f"count {len(notes)} < min {expect['minCount']}")
        if "maxCount" in expect and len(notes) > expect["maxCount"]:
            failures.append(f"count {len(notes)} > max {expect['maxCount']}")
        if "valuesForAttribute" in expect:
            want = expect["valuesForAttribute"]
            got = sink.attribute_values(want["attribute"], sub_id)
            if Counter(map(repr, got)) != Counter(map(repr, want["values"])):
                failures.append(f"values for {want['attribute']}: {got} != {want['values']}")
        if "containsValue" in expect:
            want = expect["containsValue"]
            found = False
            for _, body in notes:
                for element in body.get("elements", []):
                    entity = element.get("entity", {})
                    if want.get("id") and entity.get("id") != want["id"]:
                        continue
                    if want.get("type") and entity.get("type") != want["type"]:
                        continue
                    for attr in element.get("attributes", []):
                        if attr.get("name") == want["attribute"] and \
                                attr.get("value") == want["value"]:
                            found = True
            if not found:
                failures.append(f"no notification carries {want}")
        if "spacingAtLeastMs" in expect:
            theta = expect["spacingAtLeastMs"]
            times = [t for t, _ in notes]
            gaps = [b - a for a, b in zip(times, times[1:])]
            if any(gap < theta for gap in gaps):
                failures.append(f"spacing violated: gaps {gaps} < {theta}")
        self._check(describe, not failures, "; ".join(failures))

    def _assert_query(self, client, action: dict, describe: str):
        endpoint = self._endpoint(action["node"])
        response = client.request(endpoint, "/v1/queryContext", action.get("query", {}))
        elements = response.get("elements", [])
        expect = action.get("expect", {})
        failures = []
        if "count" in expect and len(elements) != expect["count"]:
            failures.append(f"count {len(elements)} != {expect['count']}")
        if "containsEntity" in expect:
            want = expect["containsEntity"]
            if not any(
                e["entity"].get("id") == want.get("id")
                and e["entity"].get("type") == want.get("type")
                for e in elements
            ):
                failures.append(f"entity {want} not in result")
        if "attributeValue" in expect:
            want = expect["attributeValue"]
            found = any(
                e["entity"].get("id") == want["id"] and e["entity"].get("type") == want["type"]
                and any(a.get("name") == want["attribute"] and a.get("value") == want["value"]
                        for a in e.get("attributes", []))
                for e in elements
            )
            if not found:
                failures.append(f"attribute value {want} not in result")
        if "partialIncludes" in expect:
            partial = response.get("partial", [])
            for ep in expect["partialIncludes"]:
                if ep not in partial:
                    failures.append(f"{ep} missing from partial {partial}")
        if expect.get("partialEmpty") and response.get("partial"):
            failures.append(f"partial not empty: {response['partial']}")
        self._check(describe, not failures, "; ".join(failures))

    def _assert_history(self, client, action: dict, describe: str):
        endpoint = self._endpoint(action["node"])
        expect = action.get("expect", {})
        failures = []
        if "raw" in action:
            response = client.request(endpoint, "/v1/history/raw", action["raw"])
            records = response.get("records", [])
            if "count" in expect and len(records) != expect["count"]:
                failures.append(f"count {len(records)} != {expect['count']}")
            if "values" in expect:
                got = [r["value"] for r in records]
                if got != expect["values"]:
                    failures.append(f"values {got} != {expect['values']}")
        if "aggregate" in action:
            response = client.request(endpoint, "/v1/history/aggregate", action["aggregate"])
            if "buckets" in expect and response.get("buckets") != expect["buckets"]:
                failures.append(f"buckets {response.get('buckets')} != {expect['buckets']}")
        self._check(describe, not failures, "; ".join(failures))

    def _assert_binding(self, client, action: dict, describe: str):
        endpoint = self._endpoint(action["node"])
        response = client.request(endpoint, "/v1/bindings", {})
        bindings = [
            b for b in response.get("bindings", [])
            if b.get("task") == action.get("task") and b.get("input") == action.get("input")
        ]
        expect = action.get("expect", {})
        failures = []
        if not bindings:
            failures.append(f"no binding for task {action.get('task')!r} "
                            f"input {action.get('input')!r}")
        else:
            endpoints = sorted({ep for b in bindings for ep in b.get("endpoints", [])})
            if "endpoints" in expect and endpoints != sorted(expect["endpoints"]):
                failures.append(f"endpoints {endpoints} != {expect['endpoints']}")
            for ep in expect.get("endpointsInclude", []):
                if ep not in endpoints:
                    failures.append(f"{ep} not bound (have {endpoints})")
        self._check(describe, not failures, "; ".join(failures))


def run_scenario(script: dict, data_dir: Optional[str] = None) -> RunReport:
    """Validate, boot, and execute one scenario script."""
    return ScenarioRunner(script, data_dir=data_dir).run()
