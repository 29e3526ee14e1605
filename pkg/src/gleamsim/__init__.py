"""Discrete-event simulator for switch-assisted reliable RDMA multicast."""

__version__ = "0.1.0"

from .harness import MetricsReport, Scenario, ScenarioError, ring_overlay, run, sweep
from .netsim import DeadlockError, SimConfig

__all__ = [
    "MetricsReport",
    "Scenario",
    "ScenarioError",
    "DeadlockError",
    "SimConfig",
    "ring_overlay",
    "run",
    "sweep",
    "__version__",
]
