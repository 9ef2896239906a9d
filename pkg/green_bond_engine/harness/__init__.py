"""
Multi-node harness: topology configuration, simulated and TCP transports,
fault injection, scripted scenarios, the fault soak, the throughput bench and
the ``green-bond`` command line.
"""

from .bench import Workload, run_bench
from .cluster import Cluster
from .config import (
    FaultPlan,
    FaultSpec,
    ScenarioSpec,
    Topology,
    load_fault_plan,
    load_scenario,
    load_topology,
)
from .scenario import ScenarioReport, run_dir, run_scenario
from .sim import SimDriver
from .soak import SoakReport, run_soak
from .tcp import TcpDriver


__all__ = [
    'Cluster',
    'SimDriver',
    'TcpDriver',
    'Topology',
    'FaultPlan',
    'FaultSpec',
    'ScenarioSpec',
    'ScenarioReport',
    'SoakReport',
    'Workload',
    'load_topology',
    'load_fault_plan',
    'load_scenario',
    'run_dir',
    'run_scenario',
    'run_soak',
    'run_bench',
]
