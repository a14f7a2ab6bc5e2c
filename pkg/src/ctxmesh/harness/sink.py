"""A recording notification consumer used by scenarios and tests."""

from __future__ import annotations

from typing import Callable, Optional

from ..clock import Clock
from ..errors import UnknownPath
from ..model import canonical_dumps


class RecorderNode:
    """Accepts notification POSTs and keeps them in arrival order."""

    def __init__(self, node_id: str, clock: Clock,
                 on_record: Optional[Callable[[int, dict], None]] = None):
        self.node_id = node_id
        self._clock = clock
        self._on_record = on_record
        self.notes: list[tuple[int, dict]] = []

    def handle(self, path: str, body: dict, headers: dict[str, str]) -> dict:
        if path == "/v1/notify":
            now = self._clock.now_ms()
            self.notes.append((now, body))
            if self._on_record is not None:
                self._on_record(now, body)
            return {"ok": True}
        if path == "/v1/records":
            return {"notifications": [{"body": b, "t": t} for t, b in self.notes]}
        raise UnknownPath(path)

    # -- helpers for assertions ------------------------------------------------

    def notifications(self, subscription_id: Optional[str] = None) -> list[tuple[int, dict]]:
        if subscription_id is None:
            return list(self.notes)
        return [(t, b) for t, b in self.notes if b.get("subscriptionId") == subscription_id]

    def attribute_values(self, attribute: str,
                         subscription_id: Optional[str] = None) -> list:
        values = []
        for _, body in self.notifications(subscription_id):
            for element in body.get("elements", []):
                for attr in element.get("attributes", []):
                    if attr.get("name") == attribute:
                        values.append(attr.get("value"))
        return values

    def digest(self) -> list[str]:
        return [f"{t} {canonical_dumps(b).decode()}" for t, b in self.notes]
