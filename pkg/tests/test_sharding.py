import math
import random

import pytest

from eutxoshard.crypto import VrfOutput, hash256, keygen, vrf_eval
from eutxoshard.ledger import Output, Transaction, TxInput, OutputRef, counter_datum, counter_validator, pay_to
from eutxoshard.sharding import (
    NodeIdentity, ShardingError, assign_shard, compute_urs, elect_coordinator, establish_identity,
    finalize_epoch, form_epoch, leading_zero_bits, next_epoch_randomness, route_tx, select_dss,
    trailing_bits, verify_identity, vrf_ticket,
)

R0 = hash256(b"epoch-0")
R1 = hash256(b"epoch-1")
IP = bytes([10, 0, 0, 1])


def node(n):
    return keygen(hash256(b"node-%d" % n))


def digest_ending(nibble: int) -> bytes:
    return hash256(b"prefix")[:-1] + bytes([nibble])


def test_difficulty_zero_accepts_nonce_zero():
    ident = establish_identity(R0, IP, node(0), 0)
    assert ident.nonce == 0
    assert verify_identity(ident, R0, 0)


def test_identity_round_trip_and_tampering():
    ident = establish_identity(R0, IP, node(1), 8)
    assert leading_zero_bits(ident.pow_hash) >= 8
    assert verify_identity(ident, R0, 8)
    assert not verify_identity(ident, R1, 8)  # replayed into another epoch
    if ident.nonce > 0:
        stale = NodeIdentity(ident.public_key, ident.ip, ident.nonce - 1, ident.pow_hash)
        assert not verify_identity(stale, R0, 8)
    moved = NodeIdentity(ident.public_key, bytes([10, 0, 0, 2]), ident.nonce, ident.pow_hash)
    assert not verify_identity(moved, R0, 8)


def test_difficulty_bound():
    with pytest.raises(ShardingError):
        establish_identity(R0, IP, node(0), 25)


def test_mean_attempts_geometric():
    # attempts = nonce + 1 ~ Geometric(1/256); mean of 200 has sd 256/sqrt(200) ~ 18
    attempts = [establish_identity(R0, IP, node(n), 8).nonce + 1 for n in range(200)]
    mean = sum(attempts) / len(attempts)
    assert 128 <= mean <= 512


def test_assign_shard_trailing_bits():
    ident = NodeIdentity(b"k" * 32, IP, 0, digest_ending(0b0010))
    assert assign_shard(ident, 16) == 2
    assert assign_shard(ident, 1) == 0
    with pytest.raises(ShardingError):
        assign_shard(ident, 12)


def test_assignment_uniformity_4096():
    rng = random.Random(1)
    counts = [0] * 8
    for _ in range(4096):
        ident = NodeIdentity(b"k" * 32, IP, 0, rng.randbytes(32))
        counts[assign_shard(ident, 8)] += 1
    sigma = math.sqrt(4096 * (1 / 8) * (7 / 8))
    assert all(abs(c - 512) <= 5 * sigma for c in counts)


def test_coordinator_single_and_forged():
    k = node(0)
    assert elect_coordinator([vrf_ticket(k, R0)], R0) == k.address
    tickets = [vrf_ticket(node(n), R0) for n in range(5)]
    honest_winner = min(tickets, key=lambda t: t[1].value)
    forger = node(99)
    real = vrf_eval(forger.secret, R0)
    forged = (forger.public, VrfOutput(bytes(32), real.proof))
    assert elect_coordinator(tickets + [forged], R0) == keygen(hash256(b"node-%d" % tickets.index(honest_winner))).address
    with pytest.raises(ShardingError):
        elect_coordinator([forged], R0)


def test_coordinator_fairness_monte_carlo():
    # 100 nodes, 1,000 epochs; wins ~ Binomial(1000, 1/100): mean 10, sd ~3.15
    nodes = [node(n) for n in range(100)]
    wins = {k.address: 0 for k in nodes}
    for epoch in range(1000):
        seed = hash256(b"mc-epoch-%d" % epoch)
        tickets = [vrf_ticket(k, seed) for k in nodes]
        wins[elect_coordinator(tickets, seed)] += 1
    assert all(2 <= w <= 30 for w in wins.values())


def test_urs_rules():
    v = hash256(b"v")
    assert compute_urs([v]) == hash256(v)
    vals = [hash256(bytes([i])) for i in range(5)]
    assert compute_urs(vals) == compute_urs(list(reversed(vals)))
    flipped = [bytes([vals[0][0] ^ 1]) + vals[0][1:]] + vals[1:]
    assert compute_urs(flipped) != compute_urs(vals)
    with pytest.raises(ShardingError):
        compute_urs([])


def test_select_dss():
    assert select_dss(hash256(b"x"), 1) == 0
    assert select_dss(digest_ending(0b0111), 16) == 7
    rng = random.Random(2)
    counts = [0] * 8
    for _ in range(1000):
        counts[select_dss(rng.randbytes(32), 8)] += 1
    sigma = math.sqrt(1000 / 8 * 7 / 8)
    assert all(abs(c - 125) <= 5 * sigma for c in counts)


def test_route_payment_by_sender_and_contract_by_validator():
    sender = node(3)
    ref = OutputRef(hash256(b"t"), 0)
    payment = Transaction((TxInput(ref),), (Output(pay_to(sender.address), 1),), sender=sender.address)
    assert route_tx(payment, 16) == trailing_bits(sender.address, 16)
    v = counter_validator(5)
    step = Transaction((TxInput(ref),), (Output(v, 1, counter_datum(1)),), sender=sender.address)
    spent = [Output(v, 1, counter_datum(0))]
    assert route_tx(step, 16, spent) == trailing_bits(v.hash, 16)
    for other in range(20):
        s2 = node(100 + other).address
        assert route_tx(Transaction(step.inputs, step.outputs, sender=s2), 16, spent) == trailing_bits(v.hash, 16)


def test_route_two_contracts_enumerated():
    contracts = [counter_validator(3, salt=b"%d" % i) for i in range(6)]
    ref = OutputRef(hash256(b"t"), 0)
    for a in contracts:
        for b in contracts:
            if a is b:
                continue
            tx = Transaction((TxInput(ref),), (Output(a, 1, counter_datum(1)), Output(b, 1, counter_datum(1))))
            lower = min(a.hash, b.hash)
            assert route_tx(tx, 8, [Output(a, 1, counter_datum(0))]) == trailing_bits(lower, 8)


def test_finalize_epoch():
    roots = [hash256(bytes([i])) for i in range(4)]
    assert finalize_epoch(0, {0: roots[0]}, 1).global_root == roots[0]
    H = lambda a, b: hash256(a + b)
    s = finalize_epoch(3, dict(enumerate(roots)), 4)
    assert s.global_root == H(H(roots[0], roots[1]), H(roots[2], roots[3]))
    permuted = finalize_epoch(3, dict(enumerate([roots[1], roots[0], roots[2], roots[3]])), 4)
    assert permuted.global_root != s.global_root
    with pytest.raises(ShardingError, match="shard 2"):
        finalize_epoch(0, {0: roots[0], 1: roots[1], 3: roots[3]}, 4)


def _epoch(n_nodes, shard_count, randomness=R0, difficulty=2, min_size=4):
    keys = [node(n) for n in range(n_nodes)]
    idents = [establish_identity(randomness, bytes([10, 0, n // 256, n % 256]), k, difficulty) for n, k in enumerate(keys)]
    tickets = [vrf_ticket(k, randomness) for k in keys]
    return form_epoch(0, randomness, idents, tickets, shard_count, difficulty, min_size), idents, tickets


def test_form_epoch_deterministic_and_complete():
    ctx, idents, tickets = _epoch(64, 4)
    again = form_epoch(0, R0, list(reversed(idents)), list(reversed(tickets)), 4, 2)
    assert ctx == again and ctx.digest() == again.digest()
    members = [a for m in ctx.membership.values() for a in m]
    assert sorted(members) == sorted(i.address for i in idents)
    assert min(len(m) for m in ctx.membership.values()) >= 4
    if ctx.salt == 0:
        for ident in idents:
            assert ident.address in ctx.membership[trailing_bits(ident.pow_hash, 4)]


def test_form_epoch_excludes_bad_identities():
    ctx, idents, tickets = _epoch(32, 2)
    bogus = NodeIdentity(node(500).public, IP, 0, hash256(b"bogus"))
    ctx2 = form_epoch(0, R0, idents + [bogus], tickets + [vrf_ticket(node(500), R0)], 2, 2)
    assert bogus.address not in [a for m in ctx2.membership.values() for a in m]
    assert ctx2.urs == ctx.urs


def test_form_epoch_redraws_undersized_shards():
    ctx, _, _ = _epoch(17, 4, min_size=4)
    assert min(len(m) for m in ctx.membership.values()) >= 4
    with pytest.raises(ShardingError):
        _epoch(15, 4, min_size=4)


def test_next_randomness_binds_urs_and_state():
    a, b = hash256(b"a"), hash256(b"b")
    assert next_epoch_randomness(a, b) == hash256(a + b)
    assert next_epoch_randomness(a, b) != next_epoch_randomness(b, a)


def test_grinding_bound():
    # an adversary making `attempts` PoW tries lands in a chosen shard with
    # probability at most attempts / shard_count; measure over 400 trials
    shard_count, target = 16, 5
    for attempts in (1, 2, 4):
        hits = 0
        trials = 400
        for t in range(trials):
            k = node(1000 + t)
            for a in range(attempts):
                ip = bytes([192, 168, a, t % 256])
                ident = establish_identity(hash256(b"grind-%d" % t), ip, k, 0)
                if assign_shard(ident, shard_count) == target:
                    hits += 1
                    break
        bound = attempts / shard_count
        sd = math.sqrt(bound * (1 - bound) / trials) if bound < 1 else 0
        assert hits / trials <= bound + 3 * sd
