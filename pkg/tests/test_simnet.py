import json
import random

import pytest
import yaml

from eutxoshard.simnet import (
    BROADCAST, ConfigError, Latency, ScenarioConfig, Scheduler, Workload, canonical_json, from_dict,
    load_config, read_events, run_scenario,
)
from eutxoshard.layer2 import state_root
from eutxoshard.simnet.audit import audit_run, tx_problems, utxo_root
from eutxoshard.ledger import Transaction, TxInput, UtxoSet, validate_tx

from helpers import PEOPLE, double_spend_events, pay


SMALL = ScenarioConfig(seed=3, nodes=16, shard_count=2, epochs=3)


@pytest.fixture(scope="module")
def small_run():
    return run_scenario(SMALL)


# --- scheduler -----------------------------------------------------------------


def test_same_slot_events_keep_enqueue_order():
    s = Scheduler(seed=0)
    got = []
    s.register("a", lambda ev: got.append(ev.payload))
    for n in range(5):
        s.send("x", "a", n, delay=2)
    s.run_until(2)
    assert got == [0, 1, 2, 3, 4]


def test_broadcast_delivers_once_per_recipient():
    s = Scheduler(seed=0, latency_max=3)
    got = []
    names = [f"n{i}" for i in range(7)]
    for name in names:
        s.register(name, lambda ev: got.append(ev.dst))
    s.broadcast("x", names, "hello")
    s.run_until(10)
    assert sorted(got) == names
    assert s.delivered == 7
    assert BROADCAST not in names


def test_latency_trace_reproducible_and_in_range():
    # the scheduler draws one randint per message from a generator seeded with its seed
    s = Scheduler(seed=42, latency_min=1, latency_max=3)
    sent = [s.send("x", "y", n) for n in range(200)]
    oracle = random.Random(42)
    assert [e.deliver_at for e in sent] == [oracle.randint(1, 3) for _ in range(200)]
    again = Scheduler(seed=42, latency_min=1, latency_max=3)
    assert [again.send("x", "y", n).deliver_at for n in range(200)] == [e.deliver_at for e in sent]


def test_events_never_delivered_before_they_are_sent():
    s = Scheduler(seed=1, latency_min=1, latency_max=2, reorder=True)
    log = []

    def bounce(ev):
        log.append(ev)
        if len(log) < 50:
            s.send(ev.dst, ev.src, ev.payload + 1)

    s.register("a", bounce)
    s.register("b", bounce)
    s.send("a", "b", 0)
    while s.pending():
        s.step()
    assert all(ev.deliver_at > ev.sent_at for ev in log)
    assert [(e.deliver_at, e.seq) for e in log] == sorted((e.deliver_at, e.seq) for e in log)
    with pytest.raises(ValueError):
        s.send("a", "b", 0, delay=0)


# --- config ----------------------------------------------------------------------


def test_config_round_trip(tmp_path):
    cfg = SMALL.replace(latency=Latency(1, 3), workload=Workload(peg_op=0.5))
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump(cfg.to_json()))
    assert load_config(path) == cfg


@pytest.mark.parametrize("raw, message", [
    ({"shardCount": 3}, "shardCount: must be a power of two"),
    ({"latency": {"min": 3, "max": 2}}, "latency.max: must be >= latency.min"),
    ({"workload": {"bogus": 1}}, "workload.bogus: unknown key"),
    ({"colour": "red"}, "colour: unknown key"),
    ({"byzantineFraction": 1.0}, "byzantineFraction"),
    ({"nodes": 8, "shardCount": 4}, "nodes:"),
    ({"seed": -1}, "seed: must be >= 0"),
    ({"reorder": "yes"}, "reorder: expected true or false"),
    ({"validationPeriod": 2}, "validationPeriod"),
])
def test_config_errors_name_the_field(raw, message):
    with pytest.raises(ConfigError) as err:
        from_dict(raw)
    assert message in str(err.value)


def test_config_file_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("seed: [1,\n")
    with pytest.raises(ConfigError):
        load_config(bad)


# --- runs --------------------------------------------------------------------------


def test_zero_epochs_is_empty_and_stable():
    a = run_scenario(ScenarioConfig(seed=9, epochs=0))
    b = run_scenario(ScenarioConfig(seed=9, epochs=0))
    assert a.epochs == [] and a.totals["committed"] == 0
    assert a.digest == b.digest
    assert a.digest == a.compute_digest()


def test_same_seed_same_digest_and_transcript(small_run):
    again = run_scenario(SMALL)
    assert again.digest == small_run.digest
    assert again.transcript.lines == small_run.transcript.lines
    assert run_scenario(SMALL.replace(seed=4)).digest != small_run.digest


def test_parallel_execution_changes_nothing(small_run):
    par = run_scenario(SMALL.replace(parallel=True))
    assert par.digest == small_run.digest


@pytest.mark.parametrize("seed", [0, 1])
def test_committed_equals_generated_on_one_honest_shard(seed):
    cfg = ScenarioConfig(seed=seed, nodes=16, shard_count=1, epochs=10, workload=Workload(cross_shard_payment=0))
    r = run_scenario(cfg)
    emitted = r.totals["emitted"]
    assert emitted["cross"] == 0
    assert r.totals["committed"] + r.totals["drain_committed"] == emitted["intra"] + emitted["contract"]
    assert len(r.epochs) == 10


def test_transcript_is_canonical_json_lines(small_run, tmp_path):
    path = tmp_path / "t.jsonl"
    r = run_scenario(SMALL, transcript_path=path)
    lines = path.read_text().splitlines()
    assert lines == small_run.transcript.lines
    for line in lines[:50]:
        assert canonical_json(json.loads(line)) == line
    assert r.transcript.digest() == small_run.transcript.digest()


def test_epochs_csv_has_a_row_per_epoch(small_run):
    rows = small_run.epochs_csv().splitlines()
    assert rows[0].startswith("epoch,committed_total")
    assert len(rows) == 1 + len(small_run.epochs)


def test_cross_shard_sessions_all_terminate(small_run):
    s = small_run.totals["sessions"]
    assert s["opened"] > 0
    assert s["Committed"] + s["RolledBack"] == s["opened"]
    assert all(e.locked_residue == 0 for e in small_run.epochs)


def test_bad_coordinator_announcement_is_rejected():
    cfg = ScenarioConfig(seed=3, nodes=16, shard_count=2, epochs=6, byzantine_fraction=0.3,
                         byzantine_behavior="ByzBadCoordinator")
    r = run_scenario(cfg)
    assert any(e.coordinator_rejected for e in r.epochs)
    assert audit_run(r.transcript.events()).clean


# --- auditor -----------------------------------------------------------------------


def test_audit_tx_rules_agree_with_ledger_on_examples():
    a, b = PEOPLE[0], PEOPLE[1]
    utxo = UtxoSet.genesis([pay(a, 10), pay(b, 5)])
    ra, rb = sorted(utxo, key=lambda r: r.index)
    cases = [
        Transaction((TxInput(ra),), (pay(b, 10),), sender=a.address).signed(a),
        Transaction((TxInput(ra),), (pay(b, 11),), sender=a.address).signed(a),
        Transaction((TxInput(rb),), (pay(a, 5),), sender=a.address).signed(a),
        Transaction((TxInput(ra), TxInput(ra)), (pay(b, 20),), sender=a.address).signed(a),
        Transaction((), (pay(b, 1),), sender=a.address),
        Transaction((TxInput(ra),), (pay(b, 9),), fee=1, valid_to=3, sender=a.address).signed(a),
    ]
    for tx in cases:
        for slot in (0, 5):
            assert (not tx_problems(utxo.get, tx, slot)) == validate_tx(utxo, tx, slot).valid


def test_audit_state_root_matches_rollup_root():
    utxo = UtxoSet.genesis([pay(p, 7 + n) for n, p in enumerate(PEOPLE)])
    assert utxo_root(dict(utxo.items())) == state_root(utxo)


def test_honest_run_audits_clean(small_run):
    report = audit_run(small_run.transcript.events())
    assert report.clean, report.render()
    assert report.stats["blocks"] > 0 and report.stats["epochs"] == 3


def test_layer2_run_audits_clean():
    cfg = ScenarioConfig(seed=2, nodes=16, shard_count=2, epochs=6, workload=Workload(peg_op=1.0, rollup_batch=0.5))
    r = run_scenario(cfg)
    report = audit_run(r.transcript.events())
    assert report.clean, report.render()
    assert report.stats["peg_ops"] > 0 and report.stats["rollup_batches"] > 0


def test_fraudulent_batcher_is_rolled_back_and_never_finalized():
    cfg = ScenarioConfig(seed=3, nodes=16, shard_count=2, epochs=6, byzantine_fraction=0.3,
                         byzantine_behavior="ByzFraudulentBatcher", workload=Workload(rollup_batch=0.5))
    r = run_scenario(cfg)
    assert sum(e.rollup_rollbacks for e in r.epochs) > 0
    report = audit_run(r.transcript.events())
    assert report.clean, report.render()


def test_hand_built_double_spend_is_flagged(fixtures_dir):
    events = double_spend_events()
    text = "".join(canonical_json(e) + "\n" for e in events)
    assert (fixtures_dir / "double_spend.jsonl").read_text() == text
    report = audit_run(read_events(text.splitlines()))
    assert "DuplicateSpend" in report.kinds()
    assert all(f.slot == 2 for f in report.findings)


def test_clean_prefix_of_fixture_passes():
    events = double_spend_events()[:-1]
    assert audit_run(events).clean


def test_captured_shard_commits_invalid_block_that_auditor_flags():
    cfg = ScenarioConfig(seed=3, nodes=24, shard_count=2, epochs=4, byzantine_fraction=0.6,
                         byzantine_target_shard=0)
    r = run_scenario(cfg)
    assert r.totals["invalid_blocks_committed"] > 0
    report = audit_run(r.transcript.events())
    flagged = report.by_kind("InvalidCommittedBlock")
    assert flagged and all(f.shard == 0 for f in flagged)
    for f in flagged:
        e = r.epochs[f.epoch]
        assert e.byzantine_per_shard[0] * 3 > e.shard_sizes[0] * 2


def test_equivocation_needs_a_byzantine_quorum_and_is_flagged():
    cfg = ScenarioConfig(seed=3, nodes=24, shard_count=2, epochs=4, byzantine_fraction=0.6,
                         byzantine_target_shard=0, byzantine_behavior="ByzEquivocate")
    r = run_scenario(cfg)
    assert "Equivocation" in audit_run(r.transcript.events()).kinds()
    honest = run_scenario(cfg.replace(byzantine_fraction=0.2))
    assert audit_run(honest.transcript.events()).clean


def test_tampered_transcript_is_caught(small_run):
    events = list(small_run.transcript.events())
    final = events[-1]
    assert final["type"] == "final"
    shard, root = next(iter(final["utxo_digest"].items()))
    final["utxo_digest"][shard] = "00" * 32
    assert "StateMismatch" in audit_run(events).kinds()
