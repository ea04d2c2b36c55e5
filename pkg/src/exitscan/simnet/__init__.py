"""Deterministic in-process stand-in for the routing daemon and the Internet behind it."""

from exitscan.simnet.clock import VirtualClockLoop, run_virtual
from exitscan.simnet.config import config_from_dict, config_to_dict, dump_config, load_config
from exitscan.simnet.daemon import (ClientPolicy, FaultTable, Inspection, LatencyModel, SimConfig,
                                    SimHandles, serve_tcp, start_sim)
from exitscan.simnet.world import BehaviorKind, ExitBehavior, InvalidConfig, script_refetch_semantics

__all__ = [
    "BehaviorKind", "ClientPolicy", "ExitBehavior", "FaultTable", "Inspection", "InvalidConfig",
    "LatencyModel", "SimConfig", "SimHandles", "VirtualClockLoop", "config_from_dict",
    "config_to_dict", "dump_config", "load_config", "run_virtual", "script_refetch_semantics",
    "serve_tcp", "start_sim",
]
