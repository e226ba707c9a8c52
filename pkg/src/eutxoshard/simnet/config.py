"""Scenario configuration: a YAML mapping validated strictly on load."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from ..constants import DEFAULT_MIN_SHARD_SIZE, DEFAULT_VALIDATION_PERIOD, MAX_DIFFICULTY

BEHAVIORS = (
    "Honest",
    "ByzSignInvalid",
    "ByzEquivocate",
    "ByzSilent",
    "ByzBadCoordinator",
    "ByzFraudulentBatcher",
)


class ConfigError(ValueError):
    """Raised with a field-qualified message, e.g. ``latency.max: must be >= latency.min``."""


@dataclass(frozen=True)
class Workload:
    """Expected transactions emitted per slot.

    ``intra_shard_payment`` is per shard; the other rates are per slot for
    the whole network.
    """

    intra_shard_payment: float = 2.0
    cross_shard_payment: float = 0.5
    contract_step: float = 0.5
    peg_op: float = 0.0
    rollup_batch: float = 0.0


@dataclass(frozen=True)
class Latency:
    min: int = 1
    max: int = 2


@dataclass(frozen=True)
class ScenarioConfig:
    seed: int = 0
    nodes: int = 16
    byzantine_fraction: float = 0.0
    byzantine_behavior: str = "ByzSignInvalid"
    byzantine_target_shard: int | None = None
    shard_count: int = 1
    difficulty: int = 2
    epoch_length: int = 8
    epochs: int = 2
    min_shard_size: int = DEFAULT_MIN_SHARD_SIZE
    block_capacity: int = 16
    clients: int = 8
    coins_per_client: int = 8
    contracts: int = 2
    latency: Latency = field(default_factory=Latency)
    reorder: bool = False
    vanishing_client_fraction: float = 0.0
    lock_deadline: int | None = None
    validation_period: int = DEFAULT_VALIDATION_PERIOD
    workload: Workload = field(default_factory=Workload)
    parallel: bool = False

    @property
    def lock_period(self) -> int:
        return self.lock_deadline if self.lock_deadline is not None else 2 * self.epoch_length

    @property
    def total_slots(self) -> int:
        return self.epochs * self.epoch_length

    def to_json(self) -> dict:
        return to_yaml_dict(self)

    def replace(self, **changes) -> "ScenarioConfig":
        return validate(dataclasses.replace(self, **changes))


# YAML key -> dataclass field
_TOP = {
    "seed": "seed",
    "nodes": "nodes",
    "byzantineFraction": "byzantine_fraction",
    "byzantineBehavior": "byzantine_behavior",
    "byzantineTargetShard": "byzantine_target_shard",
    "shardCount": "shard_count",
    "difficulty": "difficulty",
    "epochLength": "epoch_length",
    "epochs": "epochs",
    "minShardSize": "min_shard_size",
    "blockCapacity": "block_capacity",
    "clients": "clients",
    "coinsPerClient": "coins_per_client",
    "contracts": "contracts",
    "latency": "latency",
    "reorder": "reorder",
    "vanishingClientFraction": "vanishing_client_fraction",
    "lockDeadline": "lock_deadline",
    "validationPeriod": "validation_period",
    "workload": "workload",
    "parallel": "parallel",
}
_WORKLOAD = {
    "intraShardPayment": "intra_shard_payment",
    "crossShardPayment": "cross_shard_payment",
    "contractStep": "contract_step",
    "pegOp": "peg_op",
    "rollupBatch": "rollup_batch",
}
_LATENCY = {"min": "min", "max": "max"}


def _int(path: str, v: Any, lo: int | None = None, hi: int | None = None) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{path}: expected an integer, got {v!r}")
    if lo is not None and v < lo:
        raise ConfigError(f"{path}: must be >= {lo}, got {v}")
    if hi is not None and v > hi:
        raise ConfigError(f"{path}: must be <= {hi}, got {v}")
    return v


def _num(path: str, v: Any, lo: float, hi: float, hi_open: bool = False) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{path}: expected a number, got {v!r}")
    if v < lo or v > hi or (hi_open and v == hi):
        bracket = ")" if hi_open else "]"
        raise ConfigError(f"{path}: must be in [{lo}, {hi}{bracket}, got {v}")
    return float(v)


def _bool(path: str, v: Any) -> bool:
    if not isinstance(v, bool):
        raise ConfigError(f"{path}: expected true or false, got {v!r}")
    return v


def _mapping(path: str, raw: Any, keys: dict[str, str]) -> dict[str, Any]:
    if not isinstance(raw, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping")
    unknown = sorted(set(raw) - set(keys))
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"{where}{unknown[0]}: unknown key")
    return {keys[k]: v for k, v in raw.items()}


def validate(cfg: ScenarioConfig) -> ScenarioConfig:
    _int("seed", cfg.seed, 0, 2**64 - 1)
    _int("nodes", cfg.nodes, 1)
    _num("byzantineFraction", cfg.byzantine_fraction, 0.0, 1.0, hi_open=True)
    if cfg.byzantine_behavior not in BEHAVIORS:
        raise ConfigError(f"byzantineBehavior: must be one of {', '.join(BEHAVIORS)}")
    _int("shardCount", cfg.shard_count, 1, 1024)
    if cfg.shard_count & (cfg.shard_count - 1):
        raise ConfigError(f"shardCount: must be a power of two, got {cfg.shard_count}")
    if cfg.byzantine_target_shard is not None:
        _int("byzantineTargetShard", cfg.byzantine_target_shard, 0, cfg.shard_count - 1)
    _int("difficulty", cfg.difficulty, 0, MAX_DIFFICULTY)
    _int("epochLength", cfg.epoch_length, 1)
    _int("epochs", cfg.epochs, 0)
    _int("minShardSize", cfg.min_shard_size, 1)
    if cfg.nodes < cfg.shard_count * cfg.min_shard_size:
        raise ConfigError(
            f"nodes: {cfg.nodes} nodes cannot fill {cfg.shard_count} shards of minShardSize {cfg.min_shard_size}"
        )
    _int("blockCapacity", cfg.block_capacity, 1)
    _int("clients", cfg.clients, 2)
    _int("coinsPerClient", cfg.coins_per_client, 1)
    _int("contracts", cfg.contracts, 0)
    _int("latency.min", cfg.latency.min, 1)
    _int("latency.max", cfg.latency.max, 1)
    if cfg.latency.max < cfg.latency.min:
        raise ConfigError("latency.max: must be >= latency.min")
    _bool("reorder", cfg.reorder)
    _num("vanishingClientFraction", cfg.vanishing_client_fraction, 0.0, 1.0)
    if cfg.lock_deadline is not None:
        _int("lockDeadline", cfg.lock_deadline, 1)
    _int("validationPeriod", cfg.validation_period, 0)
    if cfg.validation_period < 2 * cfg.latency.max:
        raise ConfigError("validationPeriod: must leave time for a challenge, at least 2 * latency.max")
    for key, name in _WORKLOAD.items():
        _num(f"workload.{key}", getattr(cfg.workload, name), 0.0, 1000.0)
    _bool("parallel", cfg.parallel)
    return cfg


def from_dict(raw: Any) -> ScenarioConfig:
    data = _mapping("", raw if raw is not None else {}, _TOP)
    if "latency" in data:
        data["latency"] = Latency(**_mapping("latency", data["latency"], _LATENCY))
    if "workload" in data:
        data["workload"] = Workload(**_mapping("workload", data["workload"], _WORKLOAD))
    return validate(ScenarioConfig(**data))


def load_config(path: str | Path) -> ScenarioConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc.__class__.__name__})") from exc
    return from_dict(raw)


def to_yaml_dict(cfg: ScenarioConfig) -> dict:
    out: dict[str, Any] = {}
    for key, name in _TOP.items():
        v = getattr(cfg, name)
        if name == "latency":
            v = {k: getattr(v, n) for k, n in _LATENCY.items()}
        elif name == "workload":
            v = {k: getattr(v, n) for k, n in _WORKLOAD.items()}
        out[key] = v
    return out

