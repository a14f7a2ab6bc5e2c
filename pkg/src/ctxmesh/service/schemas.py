"""Pydantic request/response models mirroring the wire dialect.

These document and shape-check the HTTP surface; the core modules remain
the authority on invariants and error codes. Field aliases carry the
camelCase wire names.
"""

from __future__ import annotations

from typing import Any, Optional, Union

from pydantic import BaseModel, ConfigDict, Field


class WireModel(BaseModel):
    model_config = ConfigDict(populate_by_name=True, extra="allow")

    def wire(self) -> dict:
        return self.model_dump(by_alias=True, exclude_none=True)


class EntityRefIn(WireModel):
    id: str
    type: str
    is_pattern: bool = Field(default=False, alias="isPattern")


class MetadatumIn(WireModel):
    name: str
    type: str
    value: Any = None


class AttributeIn(WireModel):
    name: str
    type: str
    value: Any = None
    metadata: list[MetadatumIn] = []


class ElementIn(WireModel):
    entity: EntityRefIn
    attributes: list[AttributeIn] = []


class ScopeIn(WireModel):
    kind: str
    min_lat: Optional[float] = Field(default=None, alias="minLat")
    min_lon: Optional[float] = Field(default=None, alias="minLon")
    max_lat: Optional[float] = Field(default=None, alias="maxLat")
    max_lon: Optional[float] = Field(default=None, alias="maxLon")
    target: Optional[str] = None
    substring: Optional[str] = None


class PolicyIn(WireModel):
    kind: str
    fn: Optional[str] = None


class UpdateContextRequest(WireModel):
    elements: list[ElementIn] = []


class QueryContextRequest(WireModel):
    entities: list[EntityRefIn] = []
    attributes: list[str] = []
    scopes: list[ScopeIn] = []


class SubscribeContextRequest(WireModel):
    patterns: list[EntityRefIn] = []
    attributes: list[str] = []
    scopes: list[ScopeIn] = []
    notify_endpoint: str = Field(alias="notifyEndpoint")
    throttling_ms: int = Field(default=0, alias="throttlingMs")
    policy: PolicyIn = PolicyIn(kind="drop")
    expires_ms: Optional[int] = Field(default=None, alias="expiresMs")


class UnsubscribeRequest(WireModel):
    id: str


class AttributeDeclIn(WireModel):
    name: str
    type: str


class RegisterContextRequest(WireModel):
    id: Optional[str] = None
    patterns: list[EntityRefIn] = []
    attributes: list[AttributeDeclIn] = []
    providing_endpoint: str = Field(alias="providingEndpoint")
    scope_meta: list[ScopeIn] = Field(default=[], alias="scopeMeta")
    thing_refs: list[EntityRefIn] = Field(default=[], alias="thingRefs")
    expires_ms: Optional[int] = Field(default=None, alias="expiresMs")


class SubscribeAvailabilityRequest(WireModel):
    patterns: list[EntityRefIn] = []
    attributes: list[str] = []
    scopes: list[ScopeIn] = []
    notify_endpoint: str = Field(alias="notifyEndpoint")
    expires_ms: Optional[int] = Field(default=None, alias="expiresMs")


class ResolveThingRequest(WireModel):
    thing: EntityRefIn


class NotificationIn(WireModel):
    subscription_id: str = Field(default="", alias="subscriptionId")
    aggregation: Optional[str] = None
    elements: list[ElementIn] = []
    registrations: Optional[list[dict]] = None
    removed: Optional[list[str]] = None


class AttachParentRequest(WireModel):
    parent_discovery: str = Field(alias="parentDiscovery")


class HistoryRawRequest(WireModel):
    entity: dict
    attribute: str
    from_ms: int = Field(alias="fromMs")
    to_ms: int = Field(alias="toMs")
    limit: Optional[int] = None
    order: Optional[str] = None


class HistoryAggregateRequest(WireModel):
    entity: dict
    attribute: str
    from_ms: int = Field(alias="fromMs")
    to_ms: int = Field(alias="toMs")
    resolution_ms: int = Field(alias="resolutionMs")
    fn: str


class AssignTaskRequest(WireModel):
    instance: dict
    broker: str
    discovery: str


class SubmitTopologyRequest(WireModel):
    topology: dict
    workers: list[dict] = []


class IdResponse(WireModel):
    id: str


class OkResponse(WireModel):
    ok: bool = True


class StatusResponse(WireModel):
    model_config = ConfigDict(populate_by_name=True, extra="allow")
    kind: str
    node_id: str = Field(alias="nodeId")


class UpdateContextResponse(WireModel):
    statuses: list[dict]


class QueryContextResponse(WireModel):
    elements: list[dict]
    partial: list[str] = []


class DiscoverResponse(WireModel):
    registrations: list[dict]


class WrittenResponse(WireModel):
    written: int


class HistoryRawResponse(WireModel):
    records: list[dict]


class HistoryAggregateResponse(WireModel):
    buckets: list[dict]


class BindingsResponse(WireModel):
    bindings: list[dict]


class SubmitTopologyResponse(WireModel):
    assignments: list[dict]
    topology: str


Request = Union[
    UpdateContextRequest, QueryContextRequest, SubscribeContextRequest,
    UnsubscribeRequest, RegisterContextRequest, SubscribeAvailabilityRequest,
    ResolveThingRequest, NotificationIn, AttachParentRequest,
    HistoryRawRequest, HistoryAggregateRequest, AssignTaskRequest,
    SubmitTopologyRequest,
]
