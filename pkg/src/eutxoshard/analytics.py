"""Shard security analytics: hypergeometric failure probabilities, epoch bounds,
time to failure and throughput scaling.

Exact results use Python integers and ``Fraction`` so that nothing overflows;
``log10_*`` variants exist for the tail probabilities of large shards.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from typing import Sequence

import numpy as np

DEFAULT_THRESHOLD = Fraction(1, 3)
MODEL_NAME = "disjoint-partition"


class AnalyticsError(ValueError):
    pass


@dataclass(frozen=True)
class ShardModel:
    N: int
    m: int
    s: int
    threshold: Fraction = DEFAULT_THRESHOLD

    def __post_init__(self) -> None:
        if self.N < 1:
            raise AnalyticsError("N must be positive")
        if not 0 <= self.m <= self.N:
            raise AnalyticsError(f"need 0 <= m <= N, got m={self.m}, N={self.N}")
        if not 1 <= self.s <= self.N:
            raise AnalyticsError(f"need 1 <= s <= N, got s={self.s}, N={self.N}")
        if not 0 < Fraction(self.threshold) <= 1:
            raise AnalyticsError("threshold must be in (0, 1]")

    @property
    def fail_at(self) -> int:
        """Smallest byzantine count that breaks a shard: ceil(s * threshold)."""
        return math.ceil(self.s * Fraction(self.threshold))


def _tail_ways(N: int, m: int, s: int, k: int) -> int:
    """Number of s-subsets holding at least k byzantine nodes."""
    return sum(math.comb(m, j) * math.comb(N - m, s - j) for j in range(max(k, 0), min(m, s) + 1))


def shard_failure_fraction(model: ShardModel) -> Fraction:
    return Fraction(_tail_ways(model.N, model.m, model.s, model.fail_at), math.comb(model.N, model.s))


def shard_failure_probability(model: ShardModel) -> float:
    """P[X >= ceil(s * threshold)] for X ~ Hypergeometric(N, m, s)."""
    return float(shard_failure_fraction(model))


def log10_shard_failure_probability(model: ShardModel) -> float:
    ways = _tail_ways(model.N, model.m, model.s, model.fail_at)
    if ways == 0:
        return -math.inf
    return math.log10(ways) - math.log10(math.comb(model.N, model.s))


def epoch_success_fraction(model: ShardModel, k: int) -> Fraction:
    """Exact probability that none of ``k`` disjoint random shards of size s fails.

    Counts ordered shard sequences by how many byzantine nodes each takes,
    walking shard by shard with the remaining pool shrinking.
    """
    if k * model.s > model.N:
        raise AnalyticsError(f"{k} shards of {model.s} exceed {model.N} nodes")
    s, limit = model.s, model.fail_at

    @lru_cache(maxsize=None)
    def ways(shard: int, byz_left: int, honest_left: int) -> int:
        if shard == k:
            return 1
        total = 0
        for b in range(0, min(limit - 1, byz_left, s) + 1):
            h = s - b
            if h > honest_left:
                continue
            total += math.comb(byz_left, b) * math.comb(honest_left, h) * ways(shard + 1, byz_left - b, honest_left - h)
        return total

    good = ways(0, model.m, model.N - model.m)
    everything = 1
    pool = model.N
    for _ in range(k):
        everything *= math.comb(pool, s)
        pool -= s
    return Fraction(good, everything)


def epoch_failure_exact(model: ShardModel, k: int) -> float:
    return float(1 - epoch_success_fraction(model, k))


@dataclass(frozen=True)
class EpochBounds:
    shards: int
    single: float
    union_upper_bound: float
    exact: float | None
    monte_carlo: float | None
    ci_low: float | None
    ci_high: float | None
    samples: int
    model: str = MODEL_NAME

    @property
    def std_error(self) -> float | None:
        if self.monte_carlo is None or not self.samples:
            return None
        p = self.monte_carlo
        return math.sqrt(max(p * (1 - p), 0.0) / self.samples)

    def to_json(self) -> dict:
        return {
            "model": self.model,
            "shards": self.shards,
            "single_shard": self.single,
            "union_upper_bound": self.union_upper_bound,
            "exact": self.exact,
            "monte_carlo": self.monte_carlo,
            "ci99": [self.ci_low, self.ci_high],
            "samples": self.samples,
        }


Z99 = 2.5758293035489004


def monte_carlo_epoch_failure(model: ShardModel, k: int, samples: int, seed: int = 0, chunk: int = 20_000) -> float:
    """Fraction of random disjoint partitions with at least one failing shard."""
    if k * model.s > model.N:
        raise AnalyticsError(f"{k} shards of {model.s} exceed {model.N} nodes")
    rng = np.random.Generator(np.random.PCG64(seed))
    failures = 0
    done = 0
    while done < samples:
        n = min(chunk, samples - done)
        # rank of each node in a random permutation; the first k*s ranks form the shards
        keys = rng.random((n, model.N))
        order = np.argsort(keys, axis=1)[:, : k * model.s]
        byz = (order < model.m).reshape(n, k, model.s).sum(axis=2)
        failures += int((byz >= model.fail_at).any(axis=1).sum())
        done += n
    return failures / samples


def epoch_failure_probability(
    model: ShardModel, k: int, samples: int = 100_000, seed: int = 0, exact: bool = True
) -> EpochBounds:
    """Union bound, Monte Carlo estimate with a 99% interval and, when cheap, the exact value."""
    if k < 1:
        raise AnalyticsError("shard count must be positive")
    if k * model.s > model.N:
        raise AnalyticsError(f"{k} shards of {model.s} exceed {model.N} nodes")
    p1 = shard_failure_probability(model)
    ex = epoch_failure_exact(model, k) if exact else None
    if samples > 0:
        mc = monte_carlo_epoch_failure(model, k, samples, seed)
        half = Z99 * math.sqrt(mc * (1 - mc) / samples)
        lo, hi = max(0.0, mc - half), min(1.0, mc + half)
    else:
        mc = lo = hi = None
    return EpochBounds(k, p1, min(1.0, k * p1), ex, mc, lo, hi, samples)


def time_to_failure(epoch_failure_prob: float, epochs_per_unit: float = 1.0) -> float:
    """Expected time units until the first failing epoch, 1/p epochs (geometric)."""
    if epochs_per_unit <= 0:
        raise AnalyticsError("epochs per unit must be positive")
    if epoch_failure_prob == 0:
        return math.inf
    if not 0 < epoch_failure_prob <= 1:
        raise AnalyticsError("probability must be in (0, 1]")
    return 1.0 / epoch_failure_prob / epochs_per_unit


def log10_time_to_failure(log10_p: float, epochs_per_unit: float = 1.0) -> float:
    if log10_p > 0:
        raise AnalyticsError("probability must be at most 1")
    return -log10_p - math.log10(epochs_per_unit)


@dataclass(frozen=True)
class ScalingReport:
    shard_counts: list[int]
    committed_per_epoch: list[float]
    scaling_factor: list[float]
    min_ratio: float = 0.9
    flagged: list[int] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "shard_counts": self.shard_counts,
            "committed_per_epoch": self.committed_per_epoch,
            "scaling_factor": self.scaling_factor,
            "min_ratio": self.min_ratio,
            "flagged": self.flagged,
        }


# config fields that must match across a scaling sweep (everything per shard)
_ALIGNED = ("epochs", "epoch_length", "block_capacity", "latency", "workload")


def scaling_report(results: Sequence, min_ratio: float = 0.9) -> ScalingReport:
    """Scaling factor T_k / (k * T_1) for each run.

    ``results`` are simulation results (anything with ``config`` and
    ``committed_per_epoch()``) or plain ``(shard_count, committed_per_epoch)`` pairs.
    """
    points = []
    ref_cfg = None
    for r in results:
        if isinstance(r, tuple):
            points.append((int(r[0]), float(r[1])))
            continue
        cfg = r.config
        if ref_cfg is None:
            ref_cfg = cfg
        for name in _ALIGNED:
            if getattr(cfg, name) != getattr(ref_cfg, name):
                raise AnalyticsError(f"runs differ in {name}; scaling needs the same per-shard workload")
        points.append((cfg.shard_count, r.committed_per_epoch()))
    if not points:
        raise AnalyticsError("no results")
    points.sort()
    counts = [k for k, _ in points]
    if len(set(counts)) != len(counts):
        raise AnalyticsError("duplicate shard counts")
    if counts[0] != 1:
        raise AnalyticsError("a single-shard baseline is required")
    base = points[0][1]
    if base <= 0:
        raise AnalyticsError("baseline committed no transactions")
    factors = [t / (k * base) for k, t in points]
    flagged = [k for k, f in zip(counts, factors) if f < min_ratio]
    return ScalingReport(counts, [t for _, t in points], factors, min_ratio, flagged)
