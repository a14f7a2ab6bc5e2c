"""FastAPI app factory wrapping one node per process.

Every endpoint converts its pydantic request model back to the wire dict
and hands it to the node's ``handle``; responses are rendered as
canonical JSON (sorted keys, compact separators) so identical payloads
are byte-identical, matching the in-memory transport exactly.
"""

from __future__ import annotations

import typing

from fastapi import FastAPI, Request, Response
from fastapi.exceptions import RequestValidationError

from ..errors import CtxMeshError, TransportError
from ..model import canonical_dumps
from . import schemas

ResponseModel = typing.Optional[type]


class CanonicalJSONResponse(Response):
    media_type = "application/json"

    def render(self, content) -> bytes:
        return canonical_dumps(content)


ROUTES: dict[str, list[tuple[str, type, ResponseModel]]] = {
    "broker": [
        ("/v1/updateContext", schemas.UpdateContextRequest, schemas.UpdateContextResponse),
        ("/v1/queryContext", schemas.QueryContextRequest, schemas.QueryContextResponse),
        ("/v1/subscribeContext", schemas.SubscribeContextRequest, schemas.IdResponse),
        ("/v1/unsubscribeContext", schemas.UnsubscribeRequest, schemas.OkResponse),
        ("/v1/status", None, schemas.StatusResponse),
    ],
    "discovery": [
        ("/v1/registerContext", schemas.RegisterContextRequest, schemas.IdResponse),
        ("/v1/discoverContextAvailability", schemas.QueryContextRequest,
         schemas.DiscoverResponse),
        ("/v1/subscribeContextAvailability", schemas.SubscribeAvailabilityRequest,
         schemas.IdResponse),
        ("/v1/unsubscribeContextAvailability", schemas.UnsubscribeRequest, schemas.OkResponse),
        ("/v1/resolveThing", schemas.ResolveThingRequest, schemas.DiscoverResponse),
        ("/v1/status", None, schemas.StatusResponse),
    ],
    "federation": [
        ("/v1/updateContext", schemas.UpdateContextRequest, schemas.UpdateContextResponse),
        ("/v1/queryContext", schemas.QueryContextRequest, schemas.QueryContextResponse),
        ("/v1/subscribeContext", schemas.SubscribeContextRequest, schemas.IdResponse),
        ("/v1/unsubscribeContext", schemas.UnsubscribeRequest, schemas.OkResponse),
        ("/v1/attachParent", schemas.AttachParentRequest, schemas.OkResponse),
        ("/v1/notify", schemas.NotificationIn, schemas.OkResponse),
        ("/v1/status", None, schemas.StatusResponse),
    ],
    "history": [
        ("/v1/notify", schemas.NotificationIn, schemas.WrittenResponse),
        ("/v1/history/raw", schemas.HistoryRawRequest, schemas.HistoryRawResponse),
        ("/v1/history/aggregate", schemas.HistoryAggregateRequest,
         schemas.HistoryAggregateResponse),
        ("/v1/status", None, schemas.StatusResponse),
    ],
    "worker": [
        ("/v1/assignTask", schemas.AssignTaskRequest, None),
        ("/v1/notify", schemas.NotificationIn, schemas.OkResponse),
        ("/v1/bindings", None, schemas.BindingsResponse),
        ("/v1/status", None, schemas.StatusResponse),
    ],
    "orchestrator": [
        ("/v1/submitTopology", schemas.SubmitTopologyRequest, schemas.SubmitTopologyResponse),
        ("/v1/plans", None, None),
        ("/v1/status", None, schemas.StatusResponse),
    ],
    "sink": [
        ("/v1/notify", schemas.NotificationIn, schemas.OkResponse),
        ("/v1/records", None, None),
    ],
}


def _make_endpoint(node, path: str, request_model: typing.Optional[type]):
    if request_model is None:
        def endpoint(request: Request):
            return node.handle(path, {}, dict(request.headers))

        return endpoint

    def endpoint(body, request: Request):
        return node.handle(path, body.model_dump(by_alias=True, exclude_unset=True),
                           dict(request.headers))

    # The closure variable cannot be referenced as a literal annotation under
    # deferred-annotation semantics; set it explicitly for FastAPI.
    endpoint.__annotations__ = {"body": request_model, "request": Request}
    return endpoint


def create_app(node, kind: str) -> FastAPI:
    """Build the HTTP frontend for one node of the given kind."""
    app = FastAPI(
        title=f"ctxmesh {kind}",
        description=f"Context mesh {kind} node {getattr(node, 'node_id', '')!r}",
        default_response_class=CanonicalJSONResponse,
    )

    for path, request_model, response_model in ROUTES[kind]:
        app.post(path, response_model=response_model)(_make_endpoint(node, path, request_model))

    @app.exception_handler(CtxMeshError)
    async def wire_error(_request: Request, exc: CtxMeshError):
        return CanonicalJSONResponse(exc.to_wire(), status_code=400)

    @app.exception_handler(TransportError)
    async def transport_error(_request: Request, exc: TransportError):
        return CanonicalJSONResponse({"error": "Unreachable", "detail": str(exc)},
                                     status_code=503)

    @app.exception_handler(RequestValidationError)
    async def validation_error(_request: Request, exc: RequestValidationError):
        errors = exc.errors()
        malformed = any(e.get("type") == "json_invalid" for e in errors)
        code = "MalformedJson" if malformed else "InvariantViolation"
        detail = "; ".join(
            f"{'.'.join(str(p) for p in e.get('loc', [])[1:])}: {e.get('msg', '')}"
            for e in errors[:3]
        )
        return CanonicalJSONResponse({"error": code, "detail": detail}, status_code=400)

    return app
