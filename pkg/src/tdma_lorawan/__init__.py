"""TDMA-LoRaWAN protocol library and discrete-event simulator."""

from .config import ConfigError, ScenarioConfig, dump_config, load_config, parse_config
from .engine import SimulationReport, capacity_search, run_simulation, sensitivity_sweep
from .phy import RadioConfig, time_on_air

__all__ = [
    "ConfigError",
    "RadioConfig",
    "ScenarioConfig",
    "SimulationReport",
    "capacity_search",
    "dump_config",
    "load_config",
    "parse_config",
    "run_simulation",
    "sensitivity_sweep",
    "time_on_air",
]
__version__ = "0.1.0"
