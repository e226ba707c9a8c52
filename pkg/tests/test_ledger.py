import itertools
import random
from dataclasses import replace

import pytest
from hypothesis import given, settings, strategies as st

from eutxoshard.constants import TERMINAL_DATUM
from eutxoshard.crypto import hash256
from eutxoshard.encoding import Reader
from eutxoshard.ledger import (
    After, Always, And, Before, ContinuesContract, DatumEquals, Kind, LedgerError, Never,
    NextDatumEquals, Not, Or, Output, OutputRef, ScriptContext, ScriptError, SignedBy,
    Transaction, TxInput, UtxoSet, ValuePreserved, apply_tx, balance_of, check_state_continuity,
    counter_datum, counter_validator, eval_script, pay_to, state_machine, tx_id, validate_tx,
)

from conftest import key

A, B, C = key(1), key(2), key(3)


def pay(kp, value):
    return Output(pay_to(kp.address), value)


def spend(refs, outputs, signer=None, fee=0, sender=None, **kw):
    tx = Transaction(
        tuple(TxInput(r) for r in refs), tuple(outputs), fee,
        sender=(sender or signer or A).address, **kw,
    )
    return tx.signed(signer) if signer else tx


@pytest.fixture
def utxo():
    return UtxoSet.genesis([pay(A, 10), pay(A, 5), pay(B, 7)])


def refs_of(u):
    return sorted(u)


# ------------------------------------------------------------------ tx_id


def test_tx_id_stable_and_fee_sensitive(utxo):
    r = refs_of(utxo)[0]
    tx = spend([r], [pay(B, 10)])
    assert tx_id(tx) == tx_id(tx)
    assert tx_id(tx) != tx_id(replace(tx, fee=1))


def test_tx_id_ignores_signatures(utxo):
    r = refs_of(utxo)[0]
    tx = spend([r], [pay(B, 10)])
    signed = tx.signed(A)
    # oracle: serialise both forms, they differ, yet the ids agree
    assert signed.to_bytes() != tx.to_bytes()
    assert tx_id(signed) == tx_id(tx) == tx_id(signed.unsigned())
    assert hash256(tx.body_bytes()) == tx_id(signed)


def test_tx_wire_round_trip(utxo):
    tx = spend(refs_of(utxo)[:2], [pay(B, 14)], signer=A, fee=1)
    r = Reader(tx.to_bytes())
    back = Transaction.decode(r)
    r.finish()
    assert back == tx
    assert Transaction.from_json(tx.to_json()) == tx


# ------------------------------------------------------------ validate_tx


def owned(u, kp):
    return [r for r, o in sorted(u.items()) if o.owner == kp.address]


def test_valid_payment(utxo):
    r = owned(utxo, A)[0]
    tx = spend([r], [pay(B, utxo[r].value)], signer=A)
    assert validate_tx(utxo, tx, 0).valid


def test_unknown_input(utxo):
    ghost = OutputRef(hash256(b"nope"), 0)
    tx = spend([ghost], [pay(B, 1)], signer=A)
    assert Kind.UNKNOWN_INPUT in validate_tx(utxo, tx, 0).kinds()


def test_double_spend_within_tx(utxo):
    r = owned(utxo, A)[0]
    tx = spend([r, r], [pay(B, 20)], signer=A)
    assert Kind.DOUBLE_SPEND_WITHIN_TX in validate_tx(utxo, tx, 0).kinds()


def test_value_imbalance(utxo):
    r = owned(utxo, A)[0]
    tx = spend([r], [pay(B, utxo[r].value + 1)], signer=A)
    assert validate_tx(utxo, tx, 0).kinds() == {Kind.VALUE_IMBALANCE}


def test_bad_signature_and_missing_owner_signature(utxo):
    r = owned(utxo, A)[0]
    tx = spend([r], [pay(B, utxo[r].value)])
    forged = replace(tx, inputs=(replace(tx.inputs[0], signature=A.sign(b"other")),))
    report = validate_tx(utxo, forged, 0)
    assert Kind.BAD_SIGNATURE in report.kinds()
    assert Kind.SCRIPT_REJECTED in report.kinds()
    stolen = tx.signed(B)
    assert validate_tx(utxo, stolen, 0).kinds() == {Kind.SCRIPT_REJECTED}


def test_validity_range(utxo):
    r = owned(utxo, A)[0]
    tx = spend([r], [pay(B, utxo[r].value)], signer=A, valid_from=5, valid_to=9)
    assert validate_tx(utxo, tx, 5).valid and validate_tx(utxo, tx, 9).valid
    assert validate_tx(utxo, tx, 4).kinds() == {Kind.OUTSIDE_VALIDITY_RANGE}
    assert validate_tx(utxo, tx, 10).kinds() == {Kind.OUTSIDE_VALIDITY_RANGE}


def test_no_inputs_rejected():
    tx = Transaction((), (pay(A, 1),))
    assert Kind.NO_INPUTS in validate_tx(UtxoSet(), tx, 0).kinds()


def test_oversized_datum_rejected(utxo):
    r = owned(utxo, A)[0]
    big = Output(Always(), utxo[r].value, b"x" * 1025)
    tx = spend([r], [big], signer=A)
    assert Kind.MALFORMED_OUTPUT in validate_tx(utxo, tx, 0).kinds()


# --------------------------------------------------------- counter machine


def counter_utxo(n, limit=10, value=3):
    v = counter_validator(limit)
    return v, UtxoSet.genesis([Output(v, value, counter_datum(n))])


def step(u, validator, nxt, value=3):
    (r,) = list(u)
    return Transaction((TxInput(r),), (Output(validator, value, nxt),))


def test_counter_step_accepted():
    v, u = counter_utxo(5)
    assert validate_tx(u, step(u, v, counter_datum(6)), 0).valid


def test_counter_skip_rejected_hand_trace():
    # validator for the single step 5 -> 6; a 5 -> 7 step fails NextDatumEquals(6)
    v = state_machine([(counter_datum(5), counter_datum(6))])
    u = UtxoSet.genesis([Output(v, 3, counter_datum(5))])
    report = validate_tx(u, step(u, v, counter_datum(7)), 0)
    assert report.kinds() == {Kind.SCRIPT_REJECTED}
    assert validate_tx(u, step(u, v, counter_datum(6)), 0).valid


def test_counter_value_must_be_preserved():
    v, u = counter_utxo(5)
    (r,) = list(u)
    tx = Transaction((TxInput(r),), (Output(v, 2, counter_datum(6)),), fee=1)
    assert Kind.SCRIPT_REJECTED in validate_tx(u, tx, 0).kinds()


def test_continuity_under_other_validator_rejected():
    v, u = counter_utxo(5)
    other = counter_validator(10, salt=b"other")
    report = validate_tx(u, step(u, other, counter_datum(6)), 0)
    assert Kind.CONTINUITY_VIOLATION in report.kinds()


def test_fork_into_two_successors_rejected():
    v, u = counter_utxo(5, value=4)
    (r,) = list(u)
    tx = Transaction((TxInput(r),), (Output(v, 2, counter_datum(6)), Output(v, 2, counter_datum(6))))
    assert Kind.CONTINUITY_VIOLATION in validate_tx(u, tx, 0).kinds()


def test_terminal_datum_releases_continuity():
    v = counter_validator(3)
    u = UtxoSet.genesis([Output(v, 3, TERMINAL_DATUM)])
    (r,) = list(u)
    tx = Transaction((TxInput(r),), (pay(A, 3),))
    assert validate_tx(u, tx, 0).valid


def _contract(tag):
    return counter_validator(3, salt=tag)


def test_check_state_continuity_enumeration():
    # oracle: every multiset of up to 3 outputs drawn from {same validator,
    # other validator, payment}; true iff exactly one same-validator output
    v, w = _contract(b"v"), _contract(b"w")
    spent = [Output(v, 1, counter_datum(0))]
    kinds = {"same": Output(v, 1, counter_datum(1)), "other": Output(w, 1, counter_datum(1)), "pay": pay(A, 1)}
    for size in range(4):
        for combo in itertools.combinations_with_replacement(sorted(kinds), size):
            tx = Transaction((), tuple(kinds[k] for k in combo))
            expected = combo.count("same") == 1
            assert check_state_continuity(tx, v.hash, spent) is expected, combo
            # terminal state releases every combination
            assert check_state_continuity(tx, v.hash, [Output(v, 1, TERMINAL_DATUM)])


def test_multi_contract_tx_requires_each_continuity():
    v, w = _contract(b"v"), _contract(b"w")
    u = UtxoSet.genesis([Output(v, 1, counter_datum(0)), Output(w, 1, counter_datum(0))])
    refs = tuple(TxInput(r) for r in sorted(u))
    good = Transaction(refs, (Output(v, 1, counter_datum(1)), Output(w, 1, counter_datum(1))))
    assert validate_tx(u, good, 0).valid
    bad = Transaction(refs, (Output(v, 2, counter_datum(1)),))
    assert Kind.CONTINUITY_VIOLATION in validate_tx(u, bad, 0).kinds()


# ------------------------------------------------------------- eval_script


def ctx_for(slot=0, signers=(), datum=b"\x01", next_datum=None, value=5, next_value=5):
    spent = Output(Always(), value, datum)
    nxt = Output(Always(), next_value, next_datum) if next_datum is not None else None
    tx = Transaction((), ())
    return ScriptContext(tx, 0, slot, spent, nxt, frozenset(signers))


def test_eval_constants_and_signed_by():
    assert eval_script(Always(), ctx_for()) is True
    assert eval_script(Never(), ctx_for()) is False
    assert eval_script(SignedBy(A.address), ctx_for(signers=[A.address])) is True
    assert eval_script(SignedBy(A.address), ctx_for(signers=[B.address])) is False


def test_eval_truth_table_oracle():
    # oracle: evaluate each atom by hand, then combine with Python's operators
    d = b"\x07"
    atoms = {
        "after10": (After(10), lambda slot, nd: slot >= 10),
        "before10": (Before(10), lambda slot, nd: slot < 10),
        "next_d": (NextDatumEquals(d), lambda slot, nd: nd == d),
    }
    for slot in (0, 9, 10, 11):
        for nd in (None, d, b"\x08"):
            ctx = ctx_for(slot=slot, next_datum=nd)
            for (na, (sa, fa)), (nb, (sb, fb)) in itertools.product(atoms.items(), repeat=2):
                a, b = fa(slot, nd), fb(slot, nd)
                assert eval_script(And((sa, sb)), ctx) == (a and b)
                assert eval_script(Or((sa, sb)), ctx) == (a or b)
                assert eval_script(Not(And((sa, sb))), ctx) == (not (a and b))
    assert eval_script(And((After(10), NextDatumEquals(d))), ctx_for(slot=9, next_datum=d)) is False


def test_eval_datum_value_continuation_atoms():
    assert eval_script(DatumEquals(b"\x01"), ctx_for()) is True
    assert eval_script(ValuePreserved(), ctx_for(next_datum=b"\x02")) is True
    assert eval_script(ValuePreserved(), ctx_for(next_datum=b"\x02", next_value=4)) is False
    assert eval_script(ContinuesContract(), ctx_for()) is False
    assert eval_script(ContinuesContract(), ctx_for(datum=TERMINAL_DATUM)) is True


def test_eval_budget_exhausted():
    wide = Or(tuple(Never() for _ in range(20_000)))
    with pytest.raises(ScriptError) as exc:
        eval_script(wide, ctx_for())
    assert exc.value.reason == "BudgetExhausted"


def test_budget_exhaustion_is_rejection():
    wide = Or(tuple(Always() for _ in range(20_000)))
    u = UtxoSet.genesis([Output(wide, 1)])
    tx = Transaction((TxInput(next(iter(u))),), (pay(A, 1),))
    report = validate_tx(u, tx, 0)
    assert report.kinds() == {Kind.SCRIPT_REJECTED}
    assert "BudgetExhausted" in str(report)


def test_script_hash_and_decode_round_trip():
    from eutxoshard.ledger import decode_script
    s = And((After(3), Or((SignedBy(A.address), Not(DatumEquals(b"q")))), ValuePreserved()))
    assert decode_script(s.script_bytes) == s
    assert s.hash == hash256(s.script_bytes)


# --------------------------------------------------------------- apply_tx


def test_apply_counts_and_immutability(utxo):
    r = owned(utxo, A)[0]
    before = dict(utxo.items())
    tx = spend([r], [pay(B, 4), pay(A, utxo[r].value - 4)], signer=A)
    after = apply_tx(utxo, tx, 0)
    assert len(utxo) == 3 and dict(utxo.items()) == before
    assert len(after) == 4 and r not in after
    with pytest.raises(LedgerError) as exc:
        apply_tx(after, tx, 0)
    assert Kind.UNKNOWN_INPUT in exc.value.report.kinds()


def test_balance_of(utxo):
    assert balance_of(UtxoSet(), A.address) == 0
    u = UtxoSet.genesis([pay(A, 5), pay(A, 7), pay(B, 1)])
    assert balance_of(u, A.address) == 12


class ReplayOracle:
    """List-based ledger written without UtxoSet or validate_tx."""

    def __init__(self, rows):
        self.rows = list(rows)  # (txid, index, owner, value)

    def apply(self, spent, created_txid, outputs):
        keys = {(t, i) for t, i in spent}
        present = {(t, i) for t, i, _, _ in self.rows}
        assert keys <= present
        self.rows = [row for row in self.rows if (row[0], row[1]) not in keys]
        self.rows += [(created_txid, n, o, v) for n, (o, v) in enumerate(outputs)]

    def balance(self, owner):
        return sum(v for _, _, o, v in self.rows if o == owner)

    def snapshot(self):
        return sorted((t, i, o, v) for t, i, o, v in self.rows)


def test_random_sequence_matches_replay_oracle():
    rng = random.Random(11)
    people = [key(n) for n in range(5)]
    u = UtxoSet.genesis([pay(p, 100) for p in people])
    oracle = ReplayOracle((r.tx_id, r.index, o.owner, o.value) for r, o in u.items())
    spent_ever = set()
    for _ in range(50):
        r, o = rng.choice(sorted(u.items()))
        owner = next(p for p in people if p.address == o.owner)
        to = rng.choice(people)
        fee = rng.randint(0, min(2, o.value))
        amount = rng.randint(0, o.value - fee)
        outs = [pay(to, amount), pay(owner, o.value - fee - amount)]
        tx = spend([r], outs, signer=owner, fee=fee)
        u = apply_tx(u, tx, 0)
        assert r not in spent_ever
        spent_ever.add(r)
        oracle.apply([(r.tx_id, r.index)], tx.id, [(x.owner, x.value) for x in outs])
        assert not spent_ever & set(u)
    assert sorted((r.tx_id, r.index, o.owner, o.value) for r, o in u.items()) == oracle.snapshot()
    for p in people:
        assert balance_of(u, p.address) == oracle.balance(p.address)


# ----------------------------------------------- brute-force small instances


SCRIPTS = [SignedBy(A.address), SignedBy(B.address), Always(), Never()]


def naive_valid(ledger, ref, out_value, fee, signer):
    """Independent rule checker for 1-in/1-out payment-style transactions."""
    if ref not in ledger:
        return False
    script, value = ledger[ref]
    if value != out_value + fee:
        return False
    if script == "always":
        return True
    if script == "never":
        return False
    return signer is not None and script == signer.address


def test_small_instance_agreement():
    rng = random.Random(3)
    checked = 0
    for _ in range(40):
        n = rng.randint(0, 5)
        outs = [Output(rng.choice(SCRIPTS), rng.randint(0, 3)) for _ in range(n)]
        u = UtxoSet.genesis(outs, tag=rng.randbytes(4))
        ledger = {}
        for r, o in u.items():
            s = o.validator
            ledger[r] = (
                "always" if isinstance(s, Always) else "never" if isinstance(s, Never) else s.address,
                o.value,
            )
        candidates = list(u) + [OutputRef(hash256(b"ghost"), 0)]
        for ref, out_value, fee, signer in itertools.product(candidates, range(4), range(2), (None, A, B)):
            tx = Transaction((TxInput(ref),), (pay(C, out_value),), fee, sender=C.address)
            if signer:
                tx = tx.signed(signer)
            assert validate_tx(u, tx, 0).valid == naive_valid(ledger, ref, out_value, fee, signer)
            checked += 1
    assert checked > 1000


@settings(max_examples=30, deadline=None)
@given(st.permutations(range(4)))
def test_validation_independent_of_input_order(perm):
    u = UtxoSet.genesis([pay(A, v) for v in (1, 2, 3, 4)])
    refs = sorted(u)
    tx = spend([refs[i] for i in perm], [pay(B, 10)], signer=A)
    assert validate_tx(u, tx, 0).valid
