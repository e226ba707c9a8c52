"""Transaction validation and state transitions over a UtxoSet."""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from ..crypto import Digest, address_of, verify_sig
from .script import ScriptContext, ScriptError, eval_script
from .tx import Output, OutputRef, Transaction, UtxoSet


class Kind(str, enum.Enum):
    UNKNOWN_INPUT = "UnknownInput"
    DOUBLE_SPEND_WITHIN_TX = "DoubleSpendWithinTx"
    VALUE_IMBALANCE = "ValueImbalance"
    BAD_SIGNATURE = "BadSignature"
    SCRIPT_REJECTED = "ScriptRejected"
    OUTSIDE_VALIDITY_RANGE = "OutsideValidityRange"
    CONTINUITY_VIOLATION = "ContinuityViolation"
    NO_INPUTS = "NoInputs"
    MALFORMED_OUTPUT = "MalformedOutput"


@dataclass(frozen=True)
class Violation:
    kind: Kind
    index: int | None = None
    detail: str = ""

    def __str__(self) -> str:
        s = self.kind.value
        if self.index is not None:
            s += f"({self.index})"
        return s + (f": {self.detail}" if self.detail else "")


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple = ()

    @property
    def valid(self) -> bool:
        return not self.violations

    def kinds(self) -> set:
        return {v.kind for v in self.violations}

    def __str__(self) -> str:
        return "valid" if self.valid else "; ".join(str(v) for v in self.violations)


class LedgerError(Exception):
    def __init__(self, report: ValidationReport) -> None:
        super().__init__(str(report))
        self.report = report


def valid_signers(tx: Transaction) -> tuple[frozenset[Digest], list[int]]:
    """Addresses whose signatures verify over the tx id, plus indices of bad ones."""
    tid = tx.id
    signers = set()
    bad = []
    for n, inp in enumerate(tx.inputs):
        sig = inp.signature
        if sig is None:
            continue
        if verify_sig(sig.signer, tid, sig):
            signers.add(address_of(sig.signer))
        else:
            bad.append(n)
    return frozenset(signers), bad


def continuing_output(tx: Transaction, validator_hash: Digest) -> Output | None:
    same = [o for o in tx.outputs if o.validator_hash == validator_hash]
    return same[0] if len(same) == 1 else None


def check_state_continuity(
    tx: Transaction, validator_hash: Digest, spent: Sequence[Output] = ()
) -> bool:
    """True iff the contract identified by ``validator_hash`` has exactly one successor.

    The requirement is released when every spent output of this validator
    carries the terminal datum. ``spent`` lists the contract outputs consumed.
    """
    mine = [o for o in spent if o.validator_hash == validator_hash and o.is_contract]
    if mine and all(o.is_terminal for o in mine):
        return True
    return sum(1 for o in tx.outputs if o.validator_hash == validator_hash) == 1


def check_inputs(
    view: Mapping[OutputRef, Output],
    tx: Transaction,
    slot: int | None,
    indices: Iterable[int] | None = None,
    signers: frozenset[Digest] | None = None,
) -> tuple[list[Violation], dict[int, Output]]:
    """Per-input checks: presence, script acceptance, contract continuity.

    Restricting ``indices`` lets a shard check only the inputs it owns.
    Returns violations and the resolved outputs keyed by input position.
    """
    if signers is None:
        signers, _ = valid_signers(tx)
    if indices is None:
        indices = range(len(tx.inputs))
    violations: list[Violation] = []
    resolved: dict[int, Output] = {}
    for n in indices:
        out = view.get(tx.inputs[n].ref)
        if out is None:
            violations.append(Violation(Kind.UNKNOWN_INPUT, n, str(tx.inputs[n].ref)))
            continue
        resolved[n] = out
    contracts: dict[Digest, list[Output]] = {}
    for n, out in resolved.items():
        vh = out.validator_hash
        ctx = ScriptContext(
            spending_tx=tx,
            input_index=n,
            current_slot=slot if slot is not None else tx.valid_from,
            spent_output=out,
            continuing_output=continuing_output(tx, vh),
            signers=signers,
        )
        try:
            ok = eval_script(out.validator, ctx)
        except ScriptError as exc:
            violations.append(Violation(Kind.SCRIPT_REJECTED, n, exc.reason))
        else:
            if not ok:
                violations.append(Violation(Kind.SCRIPT_REJECTED, n))
        if out.is_contract:
            contracts.setdefault(vh, []).append(out)
    for vh, outs in sorted(contracts.items()):
        if not check_state_continuity(tx, vh, outs):
            violations.append(Violation(Kind.CONTINUITY_VIOLATION, None, vh.hex()[:16]))
    return violations, resolved


def check_structure(tx: Transaction, slot: int | None) -> list[Violation]:
    """Checks needing no ledger state."""
    violations = []
    if not tx.inputs:
        violations.append(Violation(Kind.NO_INPUTS))
    seen: set[OutputRef] = set()
    for n, inp in enumerate(tx.inputs):
        if inp.ref in seen:
            violations.append(Violation(Kind.DOUBLE_SPEND_WITHIN_TX, n, str(inp.ref)))
        seen.add(inp.ref)
    for n, out in enumerate(tx.outputs):
        problem = out.well_formed()
        if problem:
            violations.append(Violation(Kind.MALFORMED_OUTPUT, n, problem))
    if slot is not None and not tx.valid_from <= slot <= tx.valid_to:
        violations.append(
            Violation(Kind.OUTSIDE_VALIDITY_RANGE, None, f"slot {slot} not in [{tx.valid_from}, {tx.valid_to}]")
        )
    return violations


def validate_tx(utxo: Mapping[OutputRef, Output], tx: Transaction, slot: int | None) -> ValidationReport:
    """Check ``tx`` against ``utxo`` at ``slot``. Violations are returned, never raised.

    ``slot=None`` skips the validity-range check.
    """
    violations = check_structure(tx, slot)
    signers, bad = valid_signers(tx)
    violations.extend(Violation(Kind.BAD_SIGNATURE, n) for n in bad)
    unique, seen = [], set()
    for n, inp in enumerate(tx.inputs):
        if inp.ref not in seen:
            seen.add(inp.ref)
            unique.append(n)
    input_violations, resolved = check_inputs(utxo, tx, slot, unique, signers)
    violations.extend(input_violations)
    if len(resolved) == len(unique):
        total_in = sum(o.value for o in resolved.values())
        total_out = sum(o.value for o in tx.outputs)
        if total_in != total_out + tx.fee:
            violations.append(
                Violation(Kind.VALUE_IMBALANCE, None, f"in={total_in} out={total_out} fee={tx.fee}")
            )
    return ValidationReport(tuple(violations))


def _apply_in_place(entries: dict[OutputRef, Output], tx: Transaction) -> None:
    for inp in tx.inputs:
        del entries[inp.ref]
    entries.update(tx.out_refs())


def apply_tx(utxo: UtxoSet, tx: Transaction, slot: int | None = None) -> UtxoSet:
    """Return a new set with ``tx`` applied; raise ``LedgerError`` if it is invalid."""
    report = validate_tx(utxo, tx, slot)
    if not report.valid:
        raise LedgerError(report)
    return utxo.updated(tx.refs, tx.out_refs())


def apply_txs(utxo: UtxoSet, txs: Sequence[Transaction], slot: int | None = None) -> UtxoSet:
    """Apply ``txs`` in order, all or nothing."""
    entries = dict(utxo.items())
    for tx in txs:
        report = validate_tx(entries, tx, slot)
        if not report.valid:
            raise LedgerError(report)
        _apply_in_place(entries, tx)
    return UtxoSet(entries)


def force_apply(utxo: UtxoSet, txs: Sequence[Transaction]) -> UtxoSet:
    """Apply without validation. Only used to model a shard that committed a
    block its quorum should have refused; refs that are missing are skipped."""
    entries = dict(utxo.items())
    for tx in txs:
        for inp in tx.inputs:
            entries.pop(inp.ref, None)
        entries.update(tx.out_refs())
    return UtxoSet(entries)


def balance_of(utxo: Mapping[OutputRef, Output], address: Digest) -> int:
    return sum(o.value for o in utxo.values() if o.owner == address)
