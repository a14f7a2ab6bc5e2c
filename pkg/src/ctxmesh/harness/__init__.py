"""Deterministic in-process scenario runner and its bundled scripts."""

from .scenario import RunReport, ScenarioRunner, load_bundled_script, run_scenario

__all__ = ["RunReport", "ScenarioRunner", "load_bundled_script", "run_scenario"]
