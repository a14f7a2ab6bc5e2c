"""Historical persistence of notification streams, metadata included.

Storage is an append-only log file per entity type under one directory:
each record is a 4-byte big-endian length prefix followed by the record's
canonical JSON. Appends are flushed and fsynced before ingestion
acknowledges, and a partial tail record left by a crash is ignored on
recovery. The full index lives in memory and is rebuilt by scanning the
segments on start.
"""

from __future__ import annotations

import bisect
import logging
import math
import os
import struct
import threading
import urllib.parse
from pathlib import Path
from typing import Optional

from .clock import Clock
from .errors import (
    InvariantViolation,
    NonNumericSeries,
    StorageFull,
    UnknownPath,
)
from .model import (
    ContextAttribute,
    ContextElement,
    canonical_dumps,
    canonical_loads,
)

log = logging.getLogger("ctxmesh.history")

_LEN = struct.Struct(">I")
DEFAULT_RAW_LIMIT = 1000
AGGREGATE_FNS = ("avg", "min", "max", "count", "last")


def record_wire(entity_id: str, entity_type: str, attribute: ContextAttribute, t_ms: int) -> dict:
    return {
        "attribute": attribute.name,
        "entity": {"id": entity_id, "type": entity_type},
        "metadata": [md.to_wire() for md in attribute.metadata],
        "t": t_ms,
        "value": attribute.value,
    }


def _dedup_key(record: dict) -> tuple:
    return (
        record["entity"]["id"],
        record["entity"]["type"],
        record["attribute"],
        record["t"],
        canonical_dumps(record["value"]),
    )


def _series_key(record: dict) -> tuple[str, str, str]:
    return (record["entity"]["id"], record["entity"]["type"], record["attribute"])


class SegmentStore:
    """Append-only segment files with an in-memory time index."""

    def __init__(self, root: str | Path, max_bytes: Optional[int] = None):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.max_bytes = max_bytes
        self._files: dict[str, object] = {}
        self._size = 0
        self._seen: set[tuple] = set()
        # series key -> sorted list of (t, seq, record)
        self._index: dict[tuple[str, str, str], list[tuple[int, int, dict]]] = {}
        self._seq = 0
        self._lock = threading.RLock()
        self._recover()

    # -- recovery ------------------------------------------------------------

    def _segment_path(self, entity_type: str) -> Path:
        return self.root / (urllib.parse.quote(entity_type, safe="") + ".log")

    def _recover(self):
        for path in sorted(self.root.glob("*.log")):
            good_bytes = 0
            with path.open("rb") as fh:
                while True:
                    header = fh.read(_LEN.size)
                    if len(header) < _LEN.size:
                        break
                    (length,) = _LEN.unpack(header)
                    payload = fh.read(length)
                    if len(payload) < length:
                        break
                    try:
                        record = canonical_loads(payload)
                    except Exception:
                        break
                    self._admit(record)
                    good_bytes += _LEN.size + length
            if good_bytes < path.stat().st_size:
                log.warning("truncating partial tail of %s at %d bytes", path.name, good_bytes)
                with path.open("r+b") as fh:
                    fh.truncate(good_bytes)
            self._size += good_bytes

    def _admit(self, record: dict) -> bool:
        key = _dedup_key(record)
        if key in self._seen:
            return False
        self._seen.add(key)
        self._seq += 1
        series = self._index.setdefault(_series_key(record), [])
        bisect.insort(series, (record["t"], self._seq, record))
        return True

    # -- writes --------------------------------------------------------------

    def append(self, record: dict) -> bool:
        """Durably append one record. Returns False for a duplicate."""
        with self._lock:
            if _dedup_key(record) in self._seen:
                return False
            payload = canonical_dumps(record)
            frame = _LEN.pack(len(payload)) + payload
            if self.max_bytes is not None and self._size + len(frame) > self.max_bytes:
                raise StorageFull(f"store at {self.root} exceeds {self.max_bytes} bytes")
            entity_type = record["entity"]["type"]
            fh = self._files.get(entity_type)
            if fh is None:
                fh = self._segment_path(entity_type).open("ab")
                self._files[entity_type] = fh
            fh.write(frame)
            fh.flush()
            os.fsync(fh.fileno())
            self._size += len(frame)
            return self._admit(record)

    def close(self):
        with self._lock:
            for fh in self._files.values():
                fh.close()
            self._files.clear()

    # -- reads ---------------------------------------------------------------

    def query_raw(self, entity_id: str, entity_type: str, attribute: str,
                  t0: int, t1: int, limit: int = DEFAULT_RAW_LIMIT,
                  order: str = "asc") -> list[dict]:
        with self._lock:
            series = self._index.get((entity_id, entity_type, attribute), [])
            lo = bisect.bisect_left(series, (t0,))
            hi = bisect.bisect_left(series, (t1,))
            records = [rec for _, _, rec in series[lo:hi]]
        if order == "desc":
            records.reverse()
        return records[:limit]

    def query_aggregate(self, entity_id: str, entity_type: str, attribute: str,
                        t0: int, t1: int, resolution: int, fn: str) -> list[tuple[int, object]]:
        records = self.query_raw(entity_id, entity_type, attribute, t0, t1, limit=2 ** 62)
        buckets: dict[int, list] = {}
        for rec in records:
            start = t0 + ((rec["t"] - t0) // resolution) * resolution
            buckets.setdefault(start, []).append(rec["value"])
        out = []
        for start in sorted(buckets):
            values = buckets[start]
            if fn in ("avg", "min", "max") and not all(
                isinstance(v, (int, float)) and not isinstance(v, bool) for v in values
            ):
                raise NonNumericSeries(f"{attribute} holds non-numeric values in range")
            if fn == "count":
                out.append((start, len(values)))
            elif fn == "last":
                out.append((start, values[-1]))
            elif fn == "avg":
                out.append((start, math.fsum(values) / len(values)))
            elif fn == "min":
                out.append((start, min(values)))
            else:
                out.append((start, max(values)))
        return out

    @property
    def record_count(self) -> int:
        with self._lock:
            return len(self._seen)


class HistoryNode:
    """Notification sink with raw and aggregate historical queries."""

    def __init__(self, node_id: str, clock: Clock, store: SegmentStore):
        self.node_id = node_id
        self._clock = clock
        self.store = store

    def handle(self, path: str, body: dict, headers: dict[str, str]) -> dict:
        if path == "/v1/notify":
            return {"written": self.ingest(body)}
        if path == "/v1/history/raw":
            return self.query_raw_wire(body)
        if path == "/v1/history/aggregate":
            return self.query_aggregate_wire(body)
        if path == "/v1/status":
            return {"kind": "history", "nodeId": self.node_id,
                    "records": self.store.record_count}
        raise UnknownPath(path)

    def ingest(self, body: dict) -> int:
        """Persist one record per (element, attribute) in a notification."""
        if not isinstance(body, dict) or not isinstance(body.get("elements"), list):
            raise InvariantViolation("elements", "notification must carry elements")
        arrival = self._clock.now_ms()
        written = 0
        for i, raw in enumerate(body["elements"]):
            element = ContextElement.from_wire(raw, f"elements[{i}]")
            for attr in element.attributes:
                ts = attr.timestamp_ms()
                record = record_wire(element.entity.id, element.entity.type, attr,
                                     ts if ts is not None else arrival)
                if self.store.append(record):
                    written += 1
        return written

    def query_raw_wire(self, body: dict) -> dict:
        entity_id, entity_type, attribute, t0, t1 = _parse_series_query(body)
        limit = body.get("limit", DEFAULT_RAW_LIMIT)
        if not isinstance(limit, int) or isinstance(limit, bool) or limit < 0:
            raise InvariantViolation("limit", "limit must be a non-negative integer")
        order = body.get("order", "asc")
        if order not in ("asc", "desc"):
            raise InvariantViolation("order", "order must be asc or desc")
        records = self.store.query_raw(entity_id, entity_type, attribute, t0, t1, limit, order)
        return {"records": records}

    def query_aggregate_wire(self, body: dict) -> dict:
        entity_id, entity_type, attribute, t0, t1 = _parse_series_query(body)
        resolution = body.get("resolutionMs")
        if not isinstance(resolution, int) or isinstance(resolution, bool) or resolution <= 0:
            raise InvariantViolation("resolutionMs", "resolutionMs must be a positive integer")
        fn = body.get("fn")
        if fn not in AGGREGATE_FNS:
            raise InvariantViolation("fn", f"fn must be one of {AGGREGATE_FNS}")
        buckets = self.store.query_aggregate(entity_id, entity_type, attribute,
                                             t0, t1, resolution, fn)
        return {"buckets": [{"start": s, "value": v} for s, v in buckets]}


def _parse_series_query(body: dict) -> tuple[str, str, str, int, int]:
    if not isinstance(body, dict):
        raise InvariantViolation("query", "query must be an object")
    entity = body.get("entity")
    if not isinstance(entity, dict) or "id" not in entity or "type" not in entity:
        raise InvariantViolation("entity", "entity must carry id and type")
    attribute = body.get("attribute")
    if not isinstance(attribute, str) or not attribute:
        raise InvariantViolation("attribute", "attribute must be a non-empty name")
    t0, t1 = body.get("fromMs"), body.get("toMs")
    for name, value in (("fromMs", t0), ("toMs", t1)):
        if not isinstance(value, int) or isinstance(value, bool):
            raise InvariantViolation(name, f"{name} must be an integer")
    if t0 >= t1:
        raise InvariantViolation("fromMs", "time range must satisfy fromMs < toMs")
    return entity["id"], entity["type"], attribute, t0, t1
