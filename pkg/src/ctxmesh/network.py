"""Transports: a deterministic in-memory router and an HTTP client.

Nodes never talk to each other directly; they post canonical JSON bodies
to endpoint base URLs through a :class:`NetworkHandle`. The in-memory
router used by the harness round-trips every body through canonical JSON
so it behaves exactly like the HTTP path, and it honors scripted
partitions.
"""

from __future__ import annotations

import logging
from typing import Callable, Optional, Protocol

from .clock import Clock
from .errors import CtxMeshError, TransportError, WireError
from .model import canonical_dumps, canonical_loads

log = logging.getLogger("ctxmesh.network")

DEFAULT_TIMEOUT_S = 2.0


class Node(Protocol):
    node_id: str

    def handle(self, path: str, body: dict, headers: dict[str, str]) -> dict: ...


class NetworkHandle:
    """A network bound to one source node; what node implementations hold."""

    def __init__(self, network: "Network", source: str):
        self._network = network
        self.source = source

    def request(self, endpoint: str, path: str, body: dict,
                headers: Optional[dict[str, str]] = None) -> dict:
        return self._network.request(self.source, endpoint, path, body, headers or {})


class Network(Protocol):
    def request(self, source: str, endpoint: str, path: str, body: dict,
                headers: dict[str, str]) -> dict: ...

    def for_node(self, source: str) -> NetworkHandle: ...


class InMemoryNetwork:
    """Routes ``mem://<name>`` endpoints to in-process nodes, synchronously."""

    def __init__(self, clock: Clock,
                 on_message: Optional[Callable[[int, str, str, str], None]] = None):
        self._clock = clock
        self._nodes: dict[str, Node] = {}
        self._partitions: list[tuple[frozenset[str], int]] = []
        self._on_message = on_message

    def register(self, name: str, node: Node) -> str:
        self._nodes[name] = node
        return f"mem://{name}"

    def for_node(self, source: str) -> NetworkHandle:
        return NetworkHandle(self, source)

    def partition(self, names: list[str], until_ms: int):
        """Cut the named nodes off from everyone else until the given time."""
        self._partitions.append((frozenset(names), until_ms))

    def _partitioned(self, name: str) -> bool:
        now = self._clock.now_ms()
        self._partitions = [(names, until) for names, until in self._partitions if until > now]
        return any(name in names for names, _ in self._partitions)

    def request(self, source: str, endpoint: str, path: str, body: dict,
                headers: dict[str, str]) -> dict:
        if not endpoint.startswith("mem://"):
            raise TransportError(f"unroutable endpoint {endpoint!r}")
        target = endpoint[len("mem://"):]
        node = self._nodes.get(target)
        if node is None:
            raise TransportError(f"no node at {endpoint!r}")
        if self._partitioned(source) or self._partitioned(target):
            raise TransportError(f"partitioned: {source} -> {target}")
        if self._on_message is not None:
            self._on_message(self._clock.now_ms(), source, target, path)
        # Round-trip through canonical JSON so handlers see exactly what a
        # remote peer would have received.
        wire_body = canonical_loads(canonical_dumps(body))
        response = node.handle(path, wire_body, dict(headers))
        return canonical_loads(canonical_dumps(response))


class HttpNetwork:
    """httpx-backed transport for served nodes and one-shot CLI clients."""

    def __init__(self, timeout_s: float = DEFAULT_TIMEOUT_S):
        import httpx

        self._client = httpx.Client(timeout=timeout_s)

    def for_node(self, source: str) -> NetworkHandle:
        return NetworkHandle(self, source)

    def request(self, source: str, endpoint: str, path: str, body: dict,
                headers: dict[str, str]) -> dict:
        import httpx

        url = endpoint.rstrip("/") + path
        try:
            response = self._client.post(
                url,
                content=canonical_dumps(body),
                headers={"content-type": "application/json", **headers},
            )
        except httpx.HTTPError as exc:
            raise TransportError(f"POST {url}: {exc}") from exc
        if response.status_code == 400:
            try:
                payload = response.json()
            except ValueError:
                payload = {}
            raise WireError(payload.get("error", "RemoteError"), payload.get("detail", ""))
        if response.status_code >= 300:
            raise TransportError(f"POST {url}: HTTP {response.status_code}")
        try:
            return response.json()
        except ValueError as exc:
            raise TransportError(f"POST {url}: non-JSON response") from exc

    def close(self):
        self._client.close()


def raise_for_handle(exc: Exception) -> CtxMeshError | TransportError:
    """Normalize transport-layer exceptions for callers that tolerate both."""
    if isinstance(exc, (CtxMeshError, TransportError)):
        return exc
    return TransportError(str(exc))
