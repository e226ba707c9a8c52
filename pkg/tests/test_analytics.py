import itertools
import math
import random
from fractions import Fraction

import pytest

from eutxoshard.analytics import (
    AnalyticsError, ShardModel, epoch_failure_exact, epoch_failure_probability,
    log10_shard_failure_probability, log10_time_to_failure, monte_carlo_epoch_failure,
    scaling_report, shard_failure_fraction, shard_failure_probability, time_to_failure,
)


def brute_shard(N, m, s, threshold=Fraction(1, 3)):
    """Enumerate every s-subset of nodes 0..N-1 where nodes < m are byzantine."""
    limit = math.ceil(s * threshold)
    bad = total = 0
    for shard in itertools.combinations(range(N), s):
        total += 1
        bad += sum(1 for n in shard if n < m) >= limit
    return Fraction(bad, total)


def brute_epoch(N, m, s, k):
    """Enumerate ordered disjoint selections of k shards."""
    limit = math.ceil(s * Fraction(1, 3))
    bad = total = 0

    def rec(pool, left, failed):
        nonlocal bad, total
        if left == 0:
            total += 1
            bad += failed
            return
        for shard in itertools.combinations(pool, s):
            rest = tuple(n for n in pool if n not in shard)
            rec(rest, left - 1, failed or sum(1 for n in shard if n < m) >= limit)

    rec(tuple(range(N)), k, False)
    return Fraction(bad, total)


def test_trivial_ends():
    assert shard_failure_probability(ShardModel(20, 0, 5)) == 0
    assert shard_failure_probability(ShardModel(20, 20, 5)) == 1
    assert ShardModel(10, 3, 4).fail_at == 2


def test_example_10_3_4():
    assert shard_failure_fraction(ShardModel(10, 3, 4)) == brute_shard(10, 3, 4)


def test_exact_matches_enumeration_up_to_14():
    for N in range(1, 15):
        for m in range(N + 1):
            for s in range(1, N + 1):
                assert shard_failure_fraction(ShardModel(N, m, s)) == brute_shard(N, m, s), (N, m, s)


def test_exact_matches_counting_oracle_all_models_up_to_14():
    # counting oracle: classify each of the C(N, s) subsets by how many byzantine it holds
    for N in range(1, 15):
        for m in range(N + 1):
            for s in range(1, N + 1):
                model = ShardModel(N, m, s)
                counts = [math.comb(m, j) * math.comb(N - m, s - j) for j in range(s + 1)]
                assert sum(counts) == math.comb(N, s)
                assert shard_failure_fraction(model) == Fraction(sum(counts[model.fail_at:]), math.comb(N, s))


def test_invalid_models():
    for args in [(0, 0, 1), (5, 6, 2), (5, 2, 0), (5, 2, 6)]:
        with pytest.raises(AnalyticsError):
            ShardModel(*args)


def test_epoch_exact_matches_partition_enumeration():
    for N, m, s, k in [(12, 3, 4, 3), (9, 2, 3, 3), (8, 3, 4, 2), (10, 4, 3, 2)]:
        model = ShardModel(N, m, s)
        assert epoch_failure_exact(model, k) == pytest.approx(float(brute_epoch(N, m, s, k)), abs=1e-15)


def test_epoch_k1_equals_single():
    model = ShardModel(30, 7, 9)
    b = epoch_failure_probability(model, 1, samples=20_000)
    assert b.union_upper_bound == pytest.approx(b.single)
    assert b.exact == pytest.approx(b.single)
    assert b.ci_low <= b.single <= b.ci_high


def test_epoch_zero_probability():
    b = epoch_failure_probability(ShardModel(30, 0, 5), 6, samples=1000)
    assert b.union_upper_bound == b.exact == b.monte_carlo == 0


def test_monte_carlo_against_small_exhaustive_case():
    model = ShardModel(12, 3, 4)
    exact = float(brute_epoch(12, 3, 4, 3))
    b = epoch_failure_probability(model, 3, samples=100_000, seed=1)
    assert b.ci_low <= exact <= b.ci_high
    big = epoch_failure_probability(ShardModel(64, 16, 16), 4, samples=100_000, seed=2)
    assert big.ci_low <= big.exact <= big.ci_high
    assert big.exact <= big.union_upper_bound


def test_monte_carlo_is_seeded():
    model = ShardModel(40, 10, 10)
    assert monte_carlo_epoch_failure(model, 3, 5000, seed=9) == monte_carlo_epoch_failure(model, 3, 5000, seed=9)


def test_monotone_in_m_and_s():
    N = 60
    for s in (6, 12, 20):
        ps = [shard_failure_fraction(ShardModel(N, m, s)) for m in range(N + 1)]
        assert all(a <= b for a, b in zip(ps, ps[1:]))
    for m in (0, 6, 12, 15):  # m/N below 1/3
        # compare sizes with the same rounding of s/3 so the threshold fraction is comparable
        ps = [shard_failure_fraction(ShardModel(N, m, s)) for s in range(3, N + 1, 3)]
        assert all(a >= b for a, b in zip(ps, ps[1:])), m


def test_tail_decays_with_size():
    ps = [log10_shard_failure_probability(ShardModel(6000, 1200, s)) for s in (30, 120, 480, 1200)]
    assert all(a > b for a, b in zip(ps, ps[1:]))
    assert ps[-1] < -20


def test_probabilities_in_unit_interval():
    rng = random.Random(3)
    for _ in range(200):
        N = rng.randint(1, 300)
        model = ShardModel(N, rng.randint(0, N), rng.randint(1, N))
        assert 0 <= shard_failure_probability(model) <= 1


def test_time_to_failure():
    assert time_to_failure(1.0) == 1
    assert time_to_failure(0.5, epochs_per_unit=2) == 1
    assert time_to_failure(0) == math.inf
    with pytest.raises(AnalyticsError):
        time_to_failure(1.5)
    assert log10_time_to_failure(-3.0) == pytest.approx(3.0)


def test_time_to_failure_grows_with_shard_size():
    N, m = 600, 150
    ttf = [time_to_failure(shard_failure_probability(ShardModel(N, m, s))) for s in range(15, 301, 15)]
    assert all(a <= b for a, b in zip(ttf, ttf[1:]))


def test_scaling_report_plain_points():
    r = scaling_report([(1, 100.0), (2, 200.0), (4, 400.0)])
    assert r.scaling_factor == [1.0, 1.0, 1.0] and not r.flagged
    r = scaling_report([(1, 100.0), (2, 100.0)])
    assert r.scaling_factor == [1.0, 0.5] and r.flagged == [2]
    with pytest.raises(AnalyticsError):
        scaling_report([(2, 100.0)])


def test_size_monotonicity_can_fail_near_one_third():
    # counting oracle: at 30% byzantine, moving from s=4 (fail at 2) to s=7 (fail at 3)
    # raises the tail, so monotonicity in s is only swept at lower fractions
    def tail(N, m, s, k):
        return Fraction(sum(math.comb(m, j) * math.comb(N - m, s - j) for j in range(k, s + 1)), math.comb(N, s))

    assert tail(90, 27, 4, 2) < tail(90, 27, 7, 3)
    assert shard_failure_fraction(ShardModel(90, 27, 4)) == tail(90, 27, 4, 2)
    assert shard_failure_fraction(ShardModel(90, 27, 7)) == tail(90, 27, 7, 3)
