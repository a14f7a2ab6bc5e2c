"""ctxmesh: a federated latest-value context mesh for IoT deployments.

Services in this package speak one HTTP+JSON wire dialect: a context broker
with throttled subscriptions, an availability discovery registry, transparent
multi-level federation nodes, a southbound device agent, a metadata-preserving
history sink, and an analytics-task orchestrator with worker daemons. A
deterministic in-process harness boots whole multi-site topologies against a
simulated clock.
"""

__version__ = "0.1.0"
