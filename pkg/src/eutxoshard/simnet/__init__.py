"""Deterministic discrete-event simulation of the sharded ledger."""
from .config import BEHAVIORS, ConfigError, Latency, ScenarioConfig, Workload, from_dict, load_config
from .engine import EpochMetrics, SimResult, Simulation, run_scenario
from .scheduler import BROADCAST, Scheduler, SimEvent
from .transcript import Transcript, TranscriptError, canonical_json, load_transcript, read_events

__all__ = [
    "BEHAVIORS", "ConfigError", "Latency", "ScenarioConfig", "Workload", "from_dict", "load_config",
    "EpochMetrics", "SimResult", "Simulation", "run_scenario",
    "BROADCAST", "Scheduler", "SimEvent",
    "Transcript", "TranscriptError", "canonical_json", "load_transcript", "read_events",
]
