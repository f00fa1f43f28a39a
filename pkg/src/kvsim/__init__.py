"""Discrete-event simulator of an LLM serving engine with layer-wise KV offloading."""

from .config import ConfigError, ScenarioConfig, load_config
from .cost_model import CostParams, HardwareSpec, ModelSpec, get_hardware, get_model
from .engine import BASELINE, LAYERKV, EngineConfig, Policy, Scenario, Simulation, run
from .metrics import MetricsReport
from .scheduler import LengthBuckets, SLOSpec
from .workload import Trace, generate_fixed, generate_sharegpt_like, load_trace

__version__ = "0.1.0"

__all__ = [
    "BASELINE", "LAYERKV", "ConfigError", "CostParams", "EngineConfig", "HardwareSpec",
    "LengthBuckets", "MetricsReport", "ModelSpec", "Policy", "SLOSpec", "Scenario",
    "ScenarioConfig", "Simulation", "Trace", "generate_fixed", "generate_sharegpt_like",
    "get_hardware", "get_model", "load_config", "load_trace", "run",
]
