"""Command line entry points.

Serve subcommands boot one node behind a FastAPI/uvicorn frontend; the
client subcommands (publish/query/subscribe/discover) are thin one-shot
HTTP clients that print canonical JSON to stdout. ``scenario run``
executes a script fully in-process under the simulated clock.

Exit codes: 0 success, 1 failure (assertion or remote error), 2 usage.
"""

from __future__ import annotations

import json
import logging
import os
import sys
from pathlib import Path

import click

from . import __version__
from .errors import CtxMeshError, ScriptError, TransportError
from .model import builtin_models, canonical_dumps, load_models_dir

log = logging.getLogger("ctxmesh.cli")


def _setup_logging():
    level = os.environ.get("CTXMESH_LOG", "info").lower()
    logging.basicConfig(
        level=logging.DEBUG if level == "debug" else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )


def _parse_listen(listen: str) -> tuple[str, int]:
    host, _, port = listen.rpartition(":")
    if not host or not port.isdigit():
        raise click.UsageError(f"--listen must be host:port, got {listen!r}")
    return host, int(port)


def _advertised(listen: str, advertise: str | None) -> str:
    if advertise:
        return advertise.rstrip("/")
    host, port = _parse_listen(listen)
    if host in ("0.0.0.0", "::"):
        host = "127.0.0.1"
    return f"http://{host}:{port}"


def _serve(node, kind: str, listen: str):
    import uvicorn

    from .service import create_app

    host, port = _parse_listen(listen)
    app = create_app(node, kind)
    uvicorn.run(app, host=host, port=port, log_level="warning")


def _load_models(models_dir: str | None) -> dict:
    return load_models_dir(models_dir) if models_dir else builtin_models()


def _emit(payload):
    click.echo(canonical_dumps(payload).decode())


def _client_call(endpoint: str, path: str, body: dict) -> dict:
    from .network import HttpNetwork

    net = HttpNetwork()
    try:
        return net.for_node("cli").request(endpoint, path, body)
    finally:
        net.close()


def _client_errors(fn):
    import functools

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except CtxMeshError as exc:
            click.echo(canonical_dumps(exc.to_wire()).decode(), err=True)
            sys.exit(1)
        except TransportError as exc:
            click.echo(f"transport error: {exc}", err=True)
            sys.exit(1)

    return wrapper


def _json_option(value: str, label: str) -> dict:
    try:
        return json.loads(value)
    except json.JSONDecodeError as exc:
        raise click.UsageError(f"bad {label} JSON: {exc}") from exc


@click.group()
@click.version_option(__version__, prog_name="ctxmesh")
def main():
    """Federated context mesh services and clients."""
    _setup_logging()


# ---------------------------------------------------------------------------
# serve commands
# ---------------------------------------------------------------------------

@main.command()
@click.option("--listen", default="127.0.0.1:1026", show_default=True)
@click.option("--node-id", default="broker", show_default=True)
@click.option("--models-dir", type=click.Path(exists=True, file_okay=False), default=None,
              help="Directory of data-model JSON files (defaults to the bundled models).")
def broker(listen, node_id, models_dir):
    """Serve a context broker."""
    from .broker import Broker
    from .clock import SystemClock
    from .network import HttpNetwork

    clock = SystemClock()
    net = HttpNetwork().for_node(node_id)
    node = Broker(node_id, _advertised(listen, None), clock, net,
                  models=_load_models(models_dir))
    _serve(node, "broker", listen)


@main.command()
@click.option("--listen", default="127.0.0.1:1030", show_default=True)
@click.option("--node-id", default="discovery", show_default=True)
def discovery(listen, node_id):
    """Serve a discovery registry."""
    from .clock import SystemClock
    from .discovery import Discovery
    from .network import HttpNetwork

    clock = SystemClock()
    net = HttpNetwork().for_node(node_id)
    node = Discovery(node_id, _advertised(listen, None), clock, net)
    _serve(node, "discovery", listen)


@main.command()
@click.option("--listen", default="127.0.0.1:1040", show_default=True)
@click.option("--node-id", default="federation", show_default=True)
@click.option("--level", type=click.IntRange(1, 4), default=3, show_default=True)
@click.option("--local-broker", required=True, help="Base URL of the node's own broker.")
@click.option("--discovery", "discovery_url", required=True,
              help="Base URL of the node's own discovery.")
@click.option("--parent-discovery", default=None,
              help="Base URL of the parent discovery to attach to.")
@click.option("--lease-ms", type=int, default=30_000, show_default=True)
@click.option("--advertise", default=None,
              help="Public base URL of this node (defaults to the listen address).")
def federate(listen, node_id, level, local_broker, discovery_url, parent_discovery,
             lease_ms, advertise):
    """Serve a federation node (broker surface, transparent routing)."""
    from .clock import SystemClock
    from .federation import FederationNode
    from .network import HttpNetwork

    clock = SystemClock()
    net = HttpNetwork().for_node(node_id)
    node = FederationNode(node_id, _advertised(listen, advertise), level,
                          local_broker.rstrip("/"), discovery_url.rstrip("/"),
                          clock, net, parent_discovery=parent_discovery,
                          lease_ms=lease_ms, concurrent_fanout=True)
    _serve(node, "federation", listen)


@main.command()
@click.option("--mapping", required=True, type=click.Path(exists=True, dir_okay=False),
              help="Device mapping JSON file.")
@click.option("--broker", "broker_url", required=True, help="Broker base URL for updates.")
@click.option("--models-dir", type=click.Path(exists=True, file_okay=False), default=None)
@click.option("--tcp-listen", default=None,
              help="host:port for newline-delimited JSON device messages.")
@click.option("--replay", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Replay file of timed device messages.")
@click.option("--speed", type=float, default=1.0, show_default=True,
              help="Replay speed factor.")
@click.option("--node-id", default="agent", show_default=True)
def agent(mapping, broker_url, models_dir, tcp_listen, replay, speed, node_id):
    """Run a southbound device agent (TCP and/or replay transports)."""
    import time

    from .agent import Agent, DeviceMapping, load_replay, run_tcp_transport, schedule_replay
    from .clock import SystemClock
    from .network import HttpNetwork

    models = _load_models(models_dir)
    clock = SystemClock()
    net = HttpNetwork().for_node(node_id)
    node = Agent(node_id, clock, net, DeviceMapping.load(mapping, models), models,
                 broker_url.rstrip("/"))
    if not tcp_listen and not replay:
        raise click.UsageError("agent needs --tcp-listen and/or --replay")
    if tcp_listen:
        host, port = _parse_listen(tcp_listen)
        run_tcp_transport(node, host, port)
        log.info("agent %s listening on %s:%d", node_id, host, port)
    if replay:
        schedule_replay(node, load_replay(replay), clock, speed=speed)
        log.info("agent %s replaying %s at %.1fx", node_id, replay, speed)
    try:
        while True:
            time.sleep(5)
            log.info("agent %s metrics: %s", node_id,
                     canonical_dumps(node.metrics.to_wire()).decode())
    except KeyboardInterrupt:
        pass


@main.command()
@click.option("--listen", default="127.0.0.1:1050", show_default=True)
@click.option("--node-id", default="history", show_default=True)
@click.option("--data-dir", required=True, type=click.Path(file_okay=False),
              help="Directory for segment files.")
@click.option("--max-bytes", type=int, default=None, help="Total storage cap.")
@click.option("--subscribe-broker", default=None,
              help="Broker base URL to auto-subscribe to (all entities).")
@click.option("--advertise", default=None)
def history(listen, node_id, data_dir, max_bytes, subscribe_broker, advertise):
    """Serve a history sink with raw and aggregate queries."""
    import uvicorn

    from .clock import SystemClock
    from .history import HistoryNode, SegmentStore
    from .network import HttpNetwork
    from .service import create_app

    clock = SystemClock()
    node = HistoryNode(node_id, clock, SegmentStore(data_dir, max_bytes=max_bytes))
    app = create_app(node, "history")
    if subscribe_broker:
        notify = _advertised(listen, advertise)
        net = HttpNetwork().for_node(node_id)

        def attach():
            response = net.request(subscribe_broker.rstrip("/"), "/v1/subscribeContext", {
                "patterns": [{"id": ".*", "isPattern": True, "type": "*"}],
                "notifyEndpoint": notify,
                "throttlingMs": 0,
                "policy": {"kind": "drop"},
                "expiresMs": clock.now_ms() + 10 ** 12,
            })
            log.info("history subscribed at %s as %s", subscribe_broker, response.get("id"))

        app.add_event_handler("startup", attach)
    host, port = _parse_listen(listen)
    uvicorn.run(app, host=host, port=port, log_level="warning")


@main.command()
@click.option("--listen", default="127.0.0.1:1060", show_default=True)
@click.option("--id", "worker_id", required=True)
@click.option("--tier", type=click.Choice(["cloud", "edge"]), default="cloud",
              show_default=True)
@click.option("--scope", "scopes", multiple=True, help="Served scope as JSON (repeatable).")
@click.option("--capacity", type=int, default=4, show_default=True)
@click.option("--advertise", default=None)
def worker(listen, worker_id, tier, scopes, capacity, advertise):
    """Serve a worker daemon hosting analytics task instances."""
    from .clock import SystemClock
    from .model import scopes_from_wire
    from .network import HttpNetwork
    from .orchestrator import Worker

    parsed = scopes_from_wire([_json_option(s, "--scope") for s in scopes], "scopes")
    clock = SystemClock()
    net = HttpNetwork().for_node(worker_id)
    node = Worker(worker_id, _advertised(listen, advertise), tier, parsed, capacity,
                  clock, net)
    _serve(node, "worker", listen)


@main.group()
def orchestrator():
    """Topology planning and dispatch."""


@orchestrator.command("submit")
@click.option("--topology", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--workers", "workers_file", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--broker", "broker_url", required=True)
@click.option("--discovery", "discovery_url", required=True)
@_client_errors
def orchestrator_submit(topology, workers_file, broker_url, discovery_url):
    """Plan a topology onto workers and dispatch the task assignments."""
    from .clock import SystemClock
    from .network import HttpNetwork
    from .orchestrator import Orchestrator

    clock = SystemClock()
    net = HttpNetwork().for_node("orchestrator")
    node = Orchestrator("orchestrator", clock, net, broker_url.rstrip("/"),
                        discovery_url.rstrip("/"))
    body = {
        "topology": json.loads(Path(topology).read_text()),
        "workers": json.loads(Path(workers_file).read_text()),
    }
    _emit(node.submit_wire(body))


@main.command()
@click.option("--listen", default="127.0.0.1:1070", show_default=True)
@click.option("--node-id", default="sink", show_default=True)
def sink(listen, node_id):
    """Serve a notification sink that records and prints deliveries."""
    from .clock import SystemClock
    from .harness.sink import RecorderNode

    clock = SystemClock()

    def show(_t, body):
        click.echo(canonical_dumps(body).decode())

    node = RecorderNode(node_id, clock, on_record=show)
    _serve(node, "sink", listen)


# ---------------------------------------------------------------------------
# one-shot clients
# ---------------------------------------------------------------------------

def _entity_options(entity_id, id_pattern, entity_type) -> list[dict]:
    if entity_id and id_pattern:
        raise click.UsageError("use --id or --id-pattern, not both")
    if id_pattern:
        return [{"id": id_pattern, "isPattern": True, "type": entity_type}]
    if entity_id:
        return [{"id": entity_id, "isPattern": False, "type": entity_type}]
    return [{"id": ".*", "isPattern": True, "type": entity_type}]


@main.command()
@click.option("--broker", "broker_url", required=True)
@click.option("--element", "elements", multiple=True, help="Element JSON (repeatable).")
@click.option("--file", "file_", type=click.Path(exists=True, dir_okay=False),
              help="JSON file with {\"elements\": [...]}.")
@click.option("--id", "entity_id", default=None)
@click.option("--type", "entity_type", default=None)
@click.option("--attr", "attrs", multiple=True,
              help="name=value shorthand (value parsed as JSON, else string).")
@_client_errors
def publish(broker_url, elements, file_, entity_id, entity_type, attrs):
    """Post context updates to a broker."""
    payload = [_json_option(e, "--element") for e in elements]
    if file_:
        payload.extend(json.loads(Path(file_).read_text()).get("elements", []))
    if entity_id or entity_type or attrs:
        if not entity_id or not entity_type:
            raise click.UsageError("--attr shorthand needs --id and --type")
        attributes = []
        for item in attrs:
            name, _, raw = item.partition("=")
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            attributes.append({"name": name, "type": "number" if isinstance(
                value, (int, float)) and not isinstance(value, bool) else "string",
                "value": value, "metadata": []})
        payload.append({"entity": {"id": entity_id, "isPattern": False, "type": entity_type},
                        "attributes": attributes})
    if not payload:
        raise click.UsageError("nothing to publish")
    response = _client_call(broker_url.rstrip("/"), "/v1/updateContext",
                            {"elements": payload})
    _emit(response.get("statuses", []))
    if not all(s.get("ok") for s in response.get("statuses", [])):
        sys.exit(1)


@main.command()
@click.option("--broker", "broker_url", required=True)
@click.option("--id", "entity_id", default=None)
@click.option("--id-pattern", default=None)
@click.option("--type", "entity_type", default="*")
@click.option("--attribute", "attributes", multiple=True)
@click.option("--scope", "scopes", multiple=True, help="Scope JSON (repeatable).")
@_client_errors
def query(broker_url, entity_id, id_pattern, entity_type, attributes, scopes):
    """Query a broker (or federation node) and print the elements."""
    body = {
        "entities": _entity_options(entity_id, id_pattern, entity_type),
        "attributes": list(attributes),
        "scopes": [_json_option(s, "--scope") for s in scopes],
    }
    response = _client_call(broker_url.rstrip("/"), "/v1/queryContext", body)
    _emit(response.get("elements", []))
    if response.get("partial"):
        click.echo(f"partial: {response['partial']}", err=True)


@main.command()
@click.option("--broker", "broker_url", required=True)
@click.option("--id", "entity_id", default=None)
@click.option("--id-pattern", default=None)
@click.option("--type", "entity_type", default="*")
@click.option("--attribute", "attributes", multiple=True)
@click.option("--scope", "scopes", multiple=True)
@click.option("--notify", required=True, help="Consumer base URL for notifications.")
@click.option("--throttling", type=int, default=0, show_default=True)
@click.option("--policy", type=click.Choice(["drop", "set", "avg", "min", "max", "last"]),
              default="drop", show_default=True)
@click.option("--expires-in", type=int, default=3_600_000, show_default=True,
              help="Lifetime in ms from now.")
@_client_errors
def subscribe(broker_url, entity_id, id_pattern, entity_type, attributes, scopes,
              notify, throttling, policy, expires_in):
    """Create a subscription and print its id."""
    import time

    if policy == "drop":
        policy_wire = {"kind": "drop"}
    elif policy == "set":
        policy_wire = {"kind": "aggregate_set"}
    else:
        policy_wire = {"kind": "aggregate_fn", "fn": policy}
    body = {
        "patterns": _entity_options(entity_id, id_pattern, entity_type),
        "attributes": list(attributes),
        "scopes": [_json_option(s, "--scope") for s in scopes],
        "notifyEndpoint": notify.rstrip("/"),
        "throttlingMs": throttling,
        "policy": policy_wire,
        "expiresMs": int(time.time() * 1000) + expires_in,
    }
    _emit(_client_call(broker_url.rstrip("/"), "/v1/subscribeContext", body))


@main.command()
@click.option("--discovery", "discovery_url", required=True)
@click.option("--id", "entity_id", default=None)
@click.option("--id-pattern", default=None)
@click.option("--type", "entity_type", default="*")
@click.option("--attribute", "attributes", multiple=True)
@click.option("--scope", "scopes", multiple=True)
@click.option("--thing", default=None, help="Resolve sensors observing id:type.")
@_client_errors
def discover(discovery_url, entity_id, id_pattern, entity_type, attributes, scopes, thing):
    """Discover providers in a registry and print the registrations."""
    endpoint = discovery_url.rstrip("/")
    if thing:
        thing_id, _, thing_type = thing.partition(":")
        if not thing_id or not thing_type:
            raise click.UsageError("--thing must be id:type")
        response = _client_call(endpoint, "/v1/resolveThing",
                                {"thing": {"id": thing_id, "isPattern": False,
                                           "type": thing_type}})
    else:
        body = {
            "entities": _entity_options(entity_id, id_pattern, entity_type),
            "attributes": list(attributes),
            "scopes": [_json_option(s, "--scope") for s in scopes],
        }
        response = _client_call(endpoint, "/v1/discoverContextAvailability", body)
    _emit(response.get("registrations", []))


# ---------------------------------------------------------------------------
# scenarios
# ---------------------------------------------------------------------------

@main.group()
def scenario():
    """Deterministic multi-node scenario runs."""


@scenario.command("run")
@click.option("--script", required=True,
              help="Script file path, or a bundled name (synchronicity|waterproof|autopilot).")
@click.option("--json", "as_json", is_flag=True, help="Emit the full report as JSON.")
def scenario_run(script, as_json):
    """Run a scenario script and report per-assertion results."""
    from .harness import load_bundled_script, run_scenario
    from .harness.scenario import load_script_file

    try:
        if Path(script).exists():
            body = load_script_file(script)
        else:
            try:
                body = load_bundled_script(script)
            except FileNotFoundError:
                raise ScriptError(f"no script file or bundled scenario named {script!r}")
        report = run_scenario(body)
    except ScriptError as exc:
        click.echo(f"script error: {exc.detail}", err=True)
        sys.exit(2)
    if as_json:
        _emit(report.to_wire())
    else:
        click.echo(report.text())
    sys.exit(0 if report.passed else 1)


if __name__ == "__main__":
    main()
