"""Layer-2 mechanics over a parent ledger: two-way pegs, rollup batches and fraud proofs.

A child chain here is single-operator; its security comes from the peg
bookkeeping on the parent and from anyone being able to re-execute a
published batch and challenge a wrong state root.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

from .constants import DEFAULT_VALIDATION_PERIOD
from .crypto import Digest, KeyPair, MerkleProof, hash256, merkle_build, merkle_prove, merkle_root, merkle_verify
from .ledger import LedgerError, Output, OutputRef, Transaction, TxInput, UtxoSet, apply_tx, pay_to, validate_tx


class PegError(ValueError):
    def __init__(self, kind: str, detail: str = "") -> None:
        super().__init__(f"{kind}: {detail}" if detail else kind)
        self.kind = kind


class RollupError(ValueError):
    def __init__(self, kind: str, detail: str = "") -> None:
        super().__init__(f"{kind}: {detail}" if detail else kind)
        self.kind = kind


# --- two-way peg -------------------------------------------------------------


@dataclass
class Chain:
    """A named ledger whose UTXO set is replaced on every accepted operation."""

    name: bytes
    utxo: UtxoSet = field(default_factory=UtxoSet)


class LockStatus(str, enum.Enum):
    LOCKED = "Locked"
    RELEASED = "Released"


@dataclass
class Lockbox:
    parent_ref: OutputRef
    amount: int
    child_chain_id: bytes
    owner: Digest
    status: LockStatus = LockStatus.LOCKED
    unlock_eligible_slot: int | None = None


@dataclass(frozen=True)
class MintAuth:
    lockbox_ref: OutputRef
    amount: int
    owner: Digest
    chain_id: bytes

    @property
    def nonce(self) -> Digest:
        return hash256(b"mint" + self.chain_id + self.lockbox_ref.key)


@dataclass(frozen=True)
class BurnProof:
    burn_tx_id: Digest
    amount: int
    owner: Digest
    burn_slot: int
    chain_id: bytes


@dataclass
class Peg:
    """Peg between ``parent`` and ``child``. Lockbox outputs on the parent are
    payable to the bridge key; the bridge only signs releases backed by a burn."""

    parent: Chain
    child: Chain
    bridge: KeyPair
    validation_period: int = DEFAULT_VALIDATION_PERIOD
    lockboxes: dict[OutputRef, Lockbox] = field(default_factory=dict)
    pending_auths: dict[Digest, MintAuth] = field(default_factory=dict)
    used_auths: set[Digest] = field(default_factory=set)
    pending_burns: dict[Digest, BurnProof] = field(default_factory=dict)
    released_burns: set[Digest] = field(default_factory=set)
    # (operation, transaction or minted entry) in the order they took effect
    journal: list[tuple[str, object]] = field(default_factory=list)

    @property
    def chain_id(self) -> bytes:
        return self.child.name

    def parent_locked(self) -> int:
        """Value actually held by live lockbox outputs on the parent."""
        return sum(
            self.parent.utxo[r].value
            for r, box in self.lockboxes.items()
            if box.status is LockStatus.LOCKED and r in self.parent.utxo
        )

    def child_claims(self) -> int:
        """Child circulation plus claims in flight: issued-but-unminted
        authorisations and burns still inside their validation period."""
        return (
            self.child.utxo.total_value()
            + sum(a.amount for a in self.pending_auths.values())
            + sum(b.amount for b in self.pending_burns.values())
        )

    def balanced(self) -> bool:
        return self.parent_locked() == self.child_claims()


def peg_lock(peg: Peg, ref: OutputRef, owner: KeyPair, amount: int, slot: int = 0) -> tuple[Lockbox, MintAuth]:
    """Spend a parent output into a lockbox of ``amount`` (plus change) and issue a mint authorisation."""
    src = peg.parent.utxo.get(ref)
    if src is None:
        raise PegError("UnknownInput", str(ref))
    if amount <= 0:
        raise PegError("InvalidAmount", "lock amount must be positive")
    if src.value < amount:
        raise PegError("InsufficientValue", f"{src.value} < {amount}")
    outputs = [Output(pay_to(peg.bridge.address), amount)]
    if src.value > amount:
        outputs.append(Output(pay_to(owner.address), src.value - amount))
    tx = Transaction((TxInput(ref),), tuple(outputs), sender=owner.address).signed(owner)
    try:
        peg.parent.utxo = apply_tx(peg.parent.utxo, tx, slot)
    except LedgerError as exc:
        raise PegError("InvalidLock", str(exc)) from exc
    peg.journal.append(("lock", tx))
    box_ref = OutputRef(tx.id, 0)
    box = Lockbox(box_ref, amount, peg.chain_id, owner.address)
    peg.lockboxes[box_ref] = box
    auth = MintAuth(box_ref, amount, owner.address, peg.chain_id)
    peg.pending_auths[auth.nonce] = auth
    return box, auth


def peg_mint(peg: Peg, auth: MintAuth) -> OutputRef:
    """Create the child-side output for ``auth``. Each authorisation mints once."""
    nonce = auth.nonce
    if nonce in peg.used_auths:
        raise PegError("AuthReused", nonce.hex()[:16])
    issued = peg.pending_auths.get(nonce)
    if issued != auth:
        raise PegError("UnknownAuth", nonce.hex()[:16])
    # lockboxes form one pool, so the box named here may already have been
    # drawn down by an unlock; the pending auth was counted against the pool
    if auth.lockbox_ref not in peg.lockboxes:
        raise PegError("UnknownLockbox", str(auth.lockbox_ref))
    ref = OutputRef(nonce, 0)
    peg.child.utxo = peg.child.utxo.updated((), [(ref, Output(pay_to(auth.owner), auth.amount))])
    del peg.pending_auths[nonce]
    peg.used_auths.add(nonce)
    peg.journal.append(("mint", (ref, peg.child.utxo[ref])))
    return ref


def peg_burn(peg: Peg, refs: Sequence[OutputRef], owner: KeyPair, slot: int) -> BurnProof:
    """Destroy child outputs owned by ``owner``; the whole input value is the burn."""
    amount = sum(peg.child.utxo[r].value for r in refs if r in peg.child.utxo)
    tx = Transaction(tuple(TxInput(r) for r in refs), (), fee=amount, sender=owner.address).signed(owner)
    report = validate_tx(peg.child.utxo, tx, slot)
    if not report.valid:
        raise PegError("InvalidBurn", str(report))
    if amount <= 0:
        raise PegError("InvalidAmount", "nothing to burn")
    peg.child.utxo = peg.child.utxo.updated(tx.refs, ())
    peg.journal.append(("burn", tx))
    proof = BurnProof(tx.id, amount, owner.address, slot, peg.chain_id)
    peg.pending_burns[tx.id] = proof
    return proof


def peg_unlock(peg: Peg, proof: BurnProof, current_slot: int) -> OutputRef:
    """Release ``proof.amount`` from lockboxes to the burner once the validation period is over.

    Lockboxes are drawn oldest first; any remainder goes back into a fresh lockbox.
    """
    if proof.burn_tx_id in peg.released_burns:
        raise PegError("BurnReplayed", proof.burn_tx_id.hex()[:16])
    if peg.pending_burns.get(proof.burn_tx_id) != proof:
        raise PegError("UnknownBurn", proof.burn_tx_id.hex()[:16])
    eligible = proof.burn_slot + peg.validation_period
    if current_slot < eligible:
        raise PegError("PeriodNotElapsed", f"slot {current_slot} < {eligible}")
    chosen, total = [], 0
    for r, box in peg.lockboxes.items():
        if total >= proof.amount:
            break
        if box.status is LockStatus.LOCKED and r in peg.parent.utxo:
            chosen.append(r)
            total += peg.parent.utxo[r].value
    if total < proof.amount:
        raise PegError("InsufficientLocked", f"{total} < {proof.amount}")
    outputs = [Output(pay_to(proof.owner), proof.amount)]
    if total > proof.amount:
        outputs.append(Output(pay_to(peg.bridge.address), total - proof.amount))
    tx = Transaction(tuple(TxInput(r) for r in chosen), tuple(outputs), sender=peg.bridge.address).signed(peg.bridge)
    peg.parent.utxo = apply_tx(peg.parent.utxo, tx, current_slot)
    peg.journal.append(("unlock", tx))
    for r in chosen:
        peg.lockboxes[r].status = LockStatus.RELEASED
        peg.lockboxes[r].unlock_eligible_slot = eligible
    if total > proof.amount:
        change = OutputRef(tx.id, 1)
        peg.lockboxes[change] = Lockbox(change, total - proof.amount, peg.chain_id, peg.bridge.address)
    del peg.pending_burns[proof.burn_tx_id]
    peg.released_burns.add(proof.burn_tx_id)
    return OutputRef(tx.id, 0)


# --- rollups -----------------------------------------------------------------


def entry_leaf(ref: OutputRef, out: Output) -> Digest:
    return hash256(ref.key + out.encoded)


def state_root(utxo: UtxoSet) -> Digest:
    """Merkle root over entries sorted by reference bytes."""
    return merkle_root([entry_leaf(r, utxo[r]) for r in sorted(utxo, key=lambda r: r.key)])


class BatchStatus(str, enum.Enum):
    PENDING = "Pending"
    FINALIZED = "Finalized"
    ROLLED_BACK = "RolledBack"


@dataclass
class BatchCommitment:
    batch_index: int
    prev_state_root: Digest
    post_state_root: Digest
    tx_data_root: Digest
    transactions: tuple[Transaction, ...]
    committed_slot: int = 0
    status: BatchStatus = BatchStatus.PENDING

    def to_json(self) -> dict:
        return {
            "batch_index": self.batch_index,
            "prev_state_root": self.prev_state_root.hex(),
            "post_state_root": self.post_state_root.hex(),
            "tx_data_root": self.tx_data_root.hex(),
            "tx_ids": [t.id.hex() for t in self.transactions],
            "committed_slot": self.committed_slot,
            "status": self.status.value,
        }


@dataclass
class Rollup:
    genesis_root: Digest
    commitments: list[BatchCommitment] = field(default_factory=list)
    validation_period: int = DEFAULT_VALIDATION_PERIOD

    @property
    def head(self) -> Digest:
        live = [c for c in self.commitments if c.status is not BatchStatus.ROLLED_BACK]
        return live[-1].post_state_root if live else self.genesis_root


def tx_data_root(batch: Sequence[Transaction]) -> Digest:
    return merkle_root([t.id for t in batch])


def rollup_commit(
    rollup: Rollup, batch: Sequence[Transaction], prev_root: Digest, claimed_post_root: Digest, slot: int = 0
) -> BatchCommitment:
    """Append a batch optimistically; nothing is executed here."""
    if prev_root != rollup.head:
        raise RollupError("StaleRoot", f"{prev_root.hex()[:16]} is not the head")
    c = BatchCommitment(
        batch_index=len(rollup.commitments),
        prev_state_root=prev_root,
        post_state_root=claimed_post_root,
        tx_data_root=tx_data_root(batch),
        transactions=tuple(batch),
        committed_slot=slot,
    )
    rollup.commitments.append(c)
    return c


def rollup_finalize(rollup: Rollup, current_slot: int) -> list[int]:
    """Mark pending batches whose challenge window has closed as final."""
    done = []
    for c in rollup.commitments:
        if c.status is BatchStatus.PENDING and current_slot >= c.committed_slot + rollup.validation_period:
            c.status = BatchStatus.FINALIZED
            done.append(c.batch_index)
    return done


def replay_state(batch: Sequence[Transaction], pre_state: UtxoSet) -> tuple[UtxoSet, list[int]]:
    """Apply valid transactions in order, skipping invalid ones. Returns the state and skipped indices."""
    entries = dict(pre_state.items())
    skipped = []
    for n, tx in enumerate(batch):
        if not validate_tx(entries, tx, None).valid:
            skipped.append(n)
            continue
        for r in tx.refs:
            del entries[r]
        entries.update(tx.out_refs())
    return UtxoSet(entries), skipped


def rollup_replay(batch: Sequence[Transaction], pre_state: UtxoSet, prev_root: Digest) -> Digest:
    if state_root(pre_state) != prev_root:
        raise RollupError("WitnessMismatch", "pre-state does not match the previous root")
    post, _ = replay_state(batch, pre_state)
    return state_root(post)


@dataclass(frozen=True)
class FraudProof:
    batch_index: int
    claimed_post_root: Digest
    pre_state_witness: UtxoSet
    tx_index: int | None = None
    tx: Transaction | None = None
    inclusion_proof: MerkleProof | None = None

    def to_json(self) -> dict:
        return {
            "batch_index": self.batch_index,
            "claimed_post_root": self.claimed_post_root.hex(),
            "witness_root": state_root(self.pre_state_witness).hex(),
            "tx_index": self.tx_index,
            "tx_id": self.tx.id.hex() if self.tx else None,
        }


def fraud_prove(commitments: Sequence[BatchCommitment], batch_index: int, pre_state: UtxoSet) -> FraudProof | None:
    """Re-execute one batch and return a proof if its claimed root is wrong.

    The proof singles out the first skipped (invalid) transaction when there
    is one, otherwise the first transaction of the batch.
    """
    c = commitments[batch_index]
    if state_root(pre_state) != c.prev_state_root:
        raise RollupError("WitnessMismatch", f"pre-state does not bind to batch {batch_index}")
    post, skipped = replay_state(c.transactions, pre_state)
    if state_root(post) == c.post_state_root:
        return None
    if not c.transactions:
        return FraudProof(batch_index, c.post_state_root, pre_state)
    idx = skipped[0] if skipped else 0
    tree = merkle_build([t.id for t in c.transactions])
    return FraudProof(batch_index, c.post_state_root, pre_state, idx, c.transactions[idx], merkle_prove(tree, idx))


def fraud_verify(rollup: Rollup, proof: FraudProof) -> list[int]:
    """Check ``proof`` and roll back the target batch and every later one.

    Returns the rolled-back indices. Raises ``RollupError("InvalidProof")``
    and leaves the rollup untouched if the proof does not hold up.
    """
    if not 0 <= proof.batch_index < len(rollup.commitments):
        raise RollupError("InvalidProof", "no such batch")
    c = rollup.commitments[proof.batch_index]
    if c.status is not BatchStatus.PENDING:
        raise RollupError("InvalidProof", f"batch {proof.batch_index} is {c.status.value}")
    if proof.claimed_post_root != c.post_state_root:
        raise RollupError("InvalidProof", "claimed root differs from the commitment")
    if tx_data_root(c.transactions) != c.tx_data_root:
        raise RollupError("InvalidProof", "published batch data does not match its root")
    if proof.tx is not None:
        if proof.inclusion_proof is None or proof.inclusion_proof.leaf_index != proof.tx_index:
            raise RollupError("InvalidProof", "missing inclusion proof")
        if not merkle_verify(c.tx_data_root, proof.tx.id, proof.inclusion_proof):
            raise RollupError("InvalidProof", "inclusion proof does not verify")
    elif c.transactions:
        raise RollupError("InvalidProof", "missing transaction")
    try:
        recomputed = rollup_replay(c.transactions, proof.pre_state_witness, c.prev_state_root)
    except RollupError as exc:
        raise RollupError("InvalidProof", exc.kind) from exc
    if recomputed == c.post_state_root:
        raise RollupError("InvalidProof", "batch replays to its claimed root")
    rolled = []
    for later in rollup.commitments[proof.batch_index:]:
        if later.status is BatchStatus.PENDING:
            later.status = BatchStatus.ROLLED_BACK
            rolled.append(later.batch_index)
    return rolled


def challenge_all(rollup: Rollup, genesis_state: UtxoSet) -> FraudProof | None:
    """Replay every live batch from genesis and prove the first wrong one."""
    state = genesis_state
    for c in rollup.commitments:
        if c.status is BatchStatus.ROLLED_BACK:
            continue
        if c.status is BatchStatus.PENDING:
            proof = fraud_prove(rollup.commitments, c.batch_index, state)
            if proof is not None:
                return proof
        state, _ = replay_state(c.transactions, state)
    return None
