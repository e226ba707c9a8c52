"""Client-coordinated atomic commit across shards.

Input shards lock the outputs a transaction spends and answer with a
quorum-signed proof of acceptance (PoA) or rejection (PoR). With a PoA from
every input shard the client asks the output shard to commit; the output
shard creates the outputs and forwards the certificate so input shards drop
the locked refs for good. A PoR, or silence past the deadline, unlocks.
"""
from __future__ import annotations

import enum
import logging
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Mapping, Sequence

from .constants import quorum_size
from .crypto import Digest, KeyPair, Signature, address_of, hash256, verify_sig
from .ledger import (
    Output, OutputRef, Transaction, UtxoSet, check_inputs, check_structure, valid_signers,
)
from .sharding import route_tx

log = logging.getLogger(__name__)


class CrossShardError(ValueError):
    pass


class SessionState(str, enum.Enum):
    INITIALIZED = "Initialized"
    LOCKED = "Locked"
    COMMITTED = "Committed"
    ROLLED_BACK = "RolledBack"

    @property
    def terminal(self) -> bool:
        return self in (SessionState.COMMITTED, SessionState.ROLLED_BACK)


class Verdict(enum.IntEnum):
    REJECT = 0
    ACCEPT = 1


MembersOf = Callable[[int, int], Sequence[Digest]]
"""(epoch, shard) -> member addresses of that shard in that epoch."""


@dataclass(frozen=True)
class ShardProof:
    """PoA (verdict ACCEPT) or PoR (verdict REJECT) from one input shard."""

    session_id: Digest
    shard: int
    verdict: Verdict
    epoch: int
    refs: tuple[OutputRef, ...]
    locked_value: int
    deadline: int
    reason: str = ""
    signatures: tuple[tuple[Digest, Signature], ...] = ()

    def message(self) -> bytes:
        refs_digest = hash256(b"".join(r.key for r in self.refs))
        return self.session_id + struct.pack(
            ">IBIQQ", self.shard, int(self.verdict), self.epoch, self.locked_value, self.deadline
        ) + refs_digest

    def quorum_valid(self, members_of: MembersOf) -> bool:
        members = set(members_of(self.epoch, self.shard))
        if not members:
            return False
        msg = self.message()
        good = set()
        for voter, sig in self.signatures:
            if voter in good or voter not in members or address_of(sig.signer) != voter:
                continue
            if verify_sig(sig.signer, msg, sig):
                good.add(voter)
        return len(good) >= quorum_size(len(members))

    def without_signature(self, n: int) -> "ShardProof":
        sigs = self.signatures[:n] + self.signatures[n + 1:]
        return ShardProof(**{**self.__dict__, "signatures": sigs})

    def to_json(self) -> dict:
        return {
            "session": self.session_id.hex(),
            "shard": self.shard,
            "verdict": self.verdict.name,
            "epoch": self.epoch,
            "refs": [r.to_json() for r in self.refs],
            "locked_value": self.locked_value,
            "deadline": self.deadline,
            "reason": self.reason,
            "signers": [v.hex() for v, _ in self.signatures],
        }


def sign_proof(proof: ShardProof, signers: Iterable[KeyPair]) -> ShardProof:
    msg = proof.message()
    sigs = tuple((k.address, k.sign(msg)) for k in signers)
    return ShardProof(**{**proof.__dict__, "signatures": sigs})


@dataclass(frozen=True)
class CommitCertificate:
    session_id: Digest
    tx: Transaction
    output_shard: int
    deadline: int
    proofs: tuple[ShardProof, ...]


@dataclass(frozen=True)
class AbortCertificate:
    session_id: Digest
    rejection: ShardProof


@dataclass
class CrossShardSession:
    """Client-side record of one atomic-commit attempt."""

    tx: Transaction
    input_shards: frozenset[int]
    output_shard: int
    inputs_by_shard: dict[int, tuple[int, ...]]
    deadline_slot: int
    state: SessionState = SessionState.INITIALIZED
    locked_refs: dict[int, list[OutputRef]] = field(default_factory=dict)
    certificates: list[ShardProof] = field(default_factory=list)

    @property
    def id(self) -> Digest:
        return self.tx.id

    def involved_shards(self) -> frozenset[int]:
        return self.input_shards | {self.output_shard}

    def record(self, proof: ShardProof) -> None:
        if proof.session_id != self.id or proof.shard not in self.input_shards:
            raise CrossShardError("proof does not belong to this session")
        if any(p.shard == proof.shard for p in self.certificates):
            return
        self.certificates.append(proof)
        if proof.verdict is Verdict.ACCEPT:
            self.locked_refs[proof.shard] = list(proof.refs)
            if set(self.locked_refs) == self.input_shards:
                self.state = SessionState.LOCKED

    def finish(self, state: SessionState) -> None:
        self.state = state
        self.locked_refs.clear()


def initiate(
    tx: Transaction,
    shard_count: int,
    locate: Callable[[OutputRef], int],
    slot: int,
    lock_period: int,
    spent: Sequence[Output] = (),
) -> CrossShardSession:
    """Open a session. ``locate`` maps each input ref to the shard holding it."""
    by_shard: dict[int, list[int]] = {}
    for n, inp in enumerate(tx.inputs):
        by_shard.setdefault(locate(inp.ref), []).append(n)
    output_shard = route_tx(tx, shard_count, spent)
    if set(by_shard) <= {output_shard}:
        raise CrossShardError("transaction is single-shard; submit it directly")
    return CrossShardSession(
        tx=tx,
        input_shards=frozenset(by_shard),
        output_shard=output_shard,
        inputs_by_shard={s: tuple(v) for s, v in sorted(by_shard.items())},
        deadline_slot=slot + lock_period,
    )


def client_commit(
    session: CrossShardSession, proofs: Iterable[ShardProof], members_of: MembersOf
) -> CommitCertificate:
    """Bundle one valid PoA per input shard into a commit certificate."""
    by_shard: dict[int, ShardProof] = {}
    for p in proofs:
        if p.session_id != session.id:
            raise CrossShardError("proof for another session")
        if p.verdict is Verdict.REJECT:
            raise CrossShardError(f"shard {p.shard} rejected the session: {p.reason}; abort required")
        by_shard[p.shard] = p
    missing = session.input_shards - set(by_shard)
    if missing:
        raise CrossShardError(f"missing PoA from shards {sorted(missing)}")
    for shard, p in sorted(by_shard.items()):
        if not p.quorum_valid(members_of):
            raise CrossShardError(f"PoA from shard {shard} lacks a valid quorum")
    return CommitCertificate(
        session.id, session.tx, session.output_shard, session.deadline_slot,
        tuple(by_shard[s] for s in sorted(session.input_shards)),
    )


def verify_certificate(cert: CommitCertificate, members_of: MembersOf) -> str | None:
    """Reason the certificate is unacceptable, or ``None``."""
    tx = cert.tx
    if tx.id != cert.session_id:
        return "certificate tx does not match session"
    covered: list[OutputRef] = []
    total = 0
    for p in cert.proofs:
        if p.session_id != cert.session_id or p.verdict is not Verdict.ACCEPT:
            return "certificate carries a non-accepting proof"
        if p.deadline != cert.deadline:
            return "deadline mismatch"
        if not p.quorum_valid(members_of):
            return f"PoA from shard {p.shard} lacks a valid quorum"
        covered.extend(p.refs)
        total += p.locked_value
    if sorted(covered) != sorted(tx.refs) or len(set(covered)) != len(covered):
        return "PoAs do not cover exactly the transaction inputs"
    if total != sum(o.value for o in tx.outputs) + tx.fee:
        return "value imbalance across shards"
    return None


# ---------------------------------------------------------------- shard side


@dataclass
class ShardSession:
    session_id: Digest
    role: set[str]
    state: SessionState
    deadline: int
    refs: tuple[OutputRef, ...] = ()
    locked_at: int | None = None
    released_at: int | None = None


class LockedView(Mapping[OutputRef, Output]):
    """The shard's UTXO set with locked refs hidden."""

    def __init__(self, utxo: UtxoSet, locks: Mapping[OutputRef, Digest]):
        self._utxo = utxo
        self._locks = locks

    def __getitem__(self, ref: OutputRef) -> Output:
        if ref in self._locks:
            raise KeyError(ref)
        return self._utxo[ref]

    def get(self, ref, default=None):
        if ref in self._locks:
            return default
        return self._utxo.get(ref, default)

    def __contains__(self, ref) -> bool:
        return ref not in self._locks and ref in self._utxo

    def __iter__(self) -> Iterator[OutputRef]:
        return (r for r in self._utxo if r not in self._locks)

    def __len__(self) -> int:
        return len(self._utxo) - sum(1 for r in self._locks if r in self._utxo)

    def items(self):
        # fast path; the Mapping default goes through __getitem__ per key
        return [(r, o) for r, o in self._utxo.items() if r not in self._locks]


class ShardLedger:
    """One shard's UTXO state plus its atomic-commit lock overlay.

    Owned by a single logical thread; every method is a state transition
    driven by one delivered message.
    """

    def __init__(self, index: int, utxo: UtxoSet | None = None, commit_margin: int = 0):
        self.index = index
        self.utxo = utxo if utxo is not None else UtxoSet()
        self.locks: dict[OutputRef, Digest] = {}
        self.sessions: dict[Digest, ShardSession] = {}
        self.commit_margin = commit_margin
        self.spent: list[OutputRef] = []
        self.open: set[Digest] = set()

    def _record(self, session_id: Digest, deadline: int) -> ShardSession:
        rec = self.sessions.get(session_id)
        if rec is None:
            rec = self.sessions[session_id] = ShardSession(
                session_id, set(), SessionState.INITIALIZED, deadline
            )
            self.open.add(session_id)
        return rec

    def _finish(self, rec: ShardSession, state: SessionState, slot: int) -> None:
        for r in rec.refs:
            if self.locks.get(r) == rec.session_id:
                del self.locks[r]
        rec.state = state
        rec.released_at = slot
        self.open.discard(rec.session_id)

    def view(self) -> LockedView:
        return LockedView(self.utxo, self.locks)

    def register_output(self, session_id: Digest, deadline: int) -> None:
        self._record(session_id, deadline).role.add("output")


def shard_lock(
    shard: ShardLedger,
    session: CrossShardSession,
    slot: int,
    epoch: int,
    signers: Sequence[KeyPair],
) -> ShardProof:
    """Validate this shard's inputs of ``session.tx``; lock them on success.

    ``signers`` are the committee members willing to sign this shard's
    verdict; the proof is only useful if they reach a quorum.
    """
    tx = session.tx
    indices = session.inputs_by_shard.get(shard.index, ())
    refs = tuple(tx.inputs[n].ref for n in indices)
    base = dict(session_id=session.id, shard=shard.index, epoch=epoch, refs=refs, deadline=session.deadline_slot)
    existing = shard.sessions.get(session.id)
    if existing is not None and "input" in existing.role and existing.locked_at is not None:
        verdict = Verdict.ACCEPT if existing.state is SessionState.LOCKED else Verdict.REJECT
        value = sum(shard.utxo[r].value for r in refs) if verdict is Verdict.ACCEPT else 0
        return sign_proof(ShardProof(verdict=verdict, locked_value=value, reason="repeat", **base), signers)

    reason = ""
    if not indices:
        reason = "NoInputsOnShard"
    elif any(r in shard.locks and shard.locks[r] != session.id for r in refs):
        reason = "AlreadyLocked"
    elif slot > session.deadline_slot:
        reason = "DeadlinePassed"
    else:
        signers_ok, bad = valid_signers(tx)
        violations, _ = check_inputs(shard.view(), tx, slot, indices, signers_ok)
        problems = check_structure(tx, slot) + violations
        if any(n in indices for n in bad):
            reason = "BadSignature"
        elif problems:
            reason = str(problems[0])

    if not reason and existing is not None and existing.state.terminal:
        reason = "SessionClosed"
    rec = shard._record(session.id, session.deadline_slot)
    rec.role.add("input")
    rec.refs = refs
    rec.locked_at = slot
    if reason:
        # locks named in ``refs`` belong to other sessions and stay put
        if not rec.state.terminal:
            shard._finish(rec, SessionState.ROLLED_BACK, slot)
        return sign_proof(ShardProof(verdict=Verdict.REJECT, locked_value=0, reason=reason, **base), signers)
    for r in refs:
        shard.locks[r] = session.id
    rec.state = SessionState.LOCKED
    value = sum(shard.utxo[r].value for r in refs)
    return sign_proof(ShardProof(verdict=Verdict.ACCEPT, locked_value=value, **base), signers)


def shard_unlock(
    shard: ShardLedger,
    certificate: CommitCertificate | AbortCertificate,
    slot: int,
    members_of: MembersOf,
) -> str:
    """Apply a commit or abort certificate. Returns what happened:
    ``committed``, ``rolled_back``, ``noop`` (replay or not applicable),
    ``refused`` or ``ignored`` (unknown session)."""
    if isinstance(certificate, AbortCertificate):
        return _abort(shard, certificate, slot, members_of)
    return _commit(shard, certificate, slot, members_of)


def _abort(shard, cert: AbortCertificate, slot, members_of) -> str:
    rec = shard.sessions.get(cert.session_id)
    if rec is None:
        log.warning("shard %d: abort for unknown session %s", shard.index, cert.session_id.hex()[:12])
        return "ignored"
    por = cert.rejection
    if por.session_id != cert.session_id or por.verdict is not Verdict.REJECT or not por.quorum_valid(members_of):
        return "refused"
    if rec.state.terminal:
        return "noop"
    shard._finish(rec, SessionState.ROLLED_BACK, slot)
    return "rolled_back"


def _commit(shard, cert: CommitCertificate, slot, members_of) -> str:
    rec = shard.sessions.get(cert.session_id)
    is_output = cert.output_shard == shard.index
    if rec is not None and rec.state.terminal:
        return "noop"
    if rec is None and not is_output:
        log.warning("shard %d: commit for unknown session %s", shard.index, cert.session_id.hex()[:12])
        return "ignored"
    problem = verify_certificate(cert, members_of)
    if problem:
        log.warning("shard %d: refusing certificate: %s", shard.index, problem)
        return "refused"
    if rec is None:
        rec = shard._record(cert.session_id, cert.deadline)
    if is_output:
        rec.role.add("output")
        # commits must land early enough for the forwarded certificate to
        # reach every input shard before its timeout sweep fires
        if slot + shard.commit_margin > cert.deadline:
            shard._finish(rec, SessionState.ROLLED_BACK, slot)
            return "refused"
    mine = [r for r in cert.tx.refs if shard.locks.get(r) == cert.session_id]
    if "input" in rec.role and len(mine) != len(rec.refs):
        return "refused"
    added = list(cert.tx.out_refs()) if is_output else []
    shard._finish(rec, SessionState.COMMITTED, slot)
    shard.utxo = shard.utxo.updated(mine, added)
    shard.spent.extend(sorted(mine))
    return "committed"


def timeout_sweep(shard: ShardLedger, current_slot: int) -> list[Digest]:
    """Roll back every session whose deadline is strictly before ``current_slot``."""
    rolled = []
    for sid in sorted(shard.open):
        rec = shard.sessions[sid]
        if rec.deadline < current_slot:
            shard._finish(rec, SessionState.ROLLED_BACK, current_slot)
            rolled.append(sid)
    return rolled
