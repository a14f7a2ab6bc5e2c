"""Bundled sample data models (JSON documents)."""
