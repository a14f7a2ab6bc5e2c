"""Error types shared by every ctxmesh service.

Each error carries a short wire code; HTTP frontends render them as
``400 {"error": code, "detail": ...}`` and the in-memory transport raises
them directly, so both modes fail identically.
"""

from __future__ import annotations


class CtxMeshError(Exception):
    """Base class for errors that map onto a wire error code."""

    code = "InternalError"

    def __init__(self, detail: str = ""):
        super().__init__(detail or self.code)
        self.detail = detail

    def to_wire(self) -> dict:
        return {"error": self.code, "detail": self.detail}


class MalformedJson(CtxMeshError):
    code = "MalformedJson"


class InvariantViolation(CtxMeshError):
    code = "InvariantViolation"

    def __init__(self, field: str, detail: str = ""):
        super().__init__(detail or field)
        self.field = field


class SynonymCollision(CtxMeshError):
    code = "SynonymCollision"


class ValidationFailed(CtxMeshError):
    code = "ValidationFailed"


class UnknownDevice(CtxMeshError):
    code = "UnknownDevice"


class InvalidSubscription(CtxMeshError):
    code = "InvalidSubscription"


class UnknownSubscription(CtxMeshError):
    code = "UnknownSubscription"


class UnknownRegistration(CtxMeshError):
    code = "UnknownRegistration"


class StorageFull(CtxMeshError):
    code = "StorageFull"


class NonNumericSeries(CtxMeshError):
    code = "NonNumericSeries"


class NoCapacity(CtxMeshError):
    code = "NoCapacity"


class UnsatisfiableInput(CtxMeshError):
    code = "UnsatisfiableInput"


class UnknownPath(CtxMeshError):
    code = "UnknownPath"


class ScriptError(CtxMeshError):
    code = "ScriptError"


class DeliveryFailed(CtxMeshError):
    code = "DeliveryFailed"


class WireError(CtxMeshError):
    """An error code received from a remote peer that we re-raise locally."""

    def __init__(self, code: str, detail: str = ""):
        super().__init__(detail)
        self.code = code or "RemoteError"


class TransportError(Exception):
    """The peer could not be reached (refused, timed out, partitioned)."""
