"""Flow-level simulation of T0/T1 data replication and production activities."""

from .activities import GridSimulation, round_robin_dest
from .engine import Event, EventKind, Simulator
from .network import Network, build_network, max_min_rates
from .scenario import ScenarioConfig, default_topology, load_scenario, parse_scenario

__all__ = [
    "Event",
    "EventKind",
    "GridSimulation",
    "Network",
    "ScenarioConfig",
    "Simulator",
    "build_network",
    "default_topology",
    "load_scenario",
    "max_min_rates",
    "parse_scenario",
    "round_robin_dest",
]
