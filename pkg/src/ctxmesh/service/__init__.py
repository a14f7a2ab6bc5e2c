"""HTTP frontends: FastAPI apps wrapping the in-process nodes."""

from .app import create_app

__all__ = ["create_app"]
