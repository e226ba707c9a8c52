"""Independent replay of a run transcript.

The auditor rebuilds every shard's UTXO set from the genesis events and
re-checks what the run claims happened: committed blocks, cross-shard
sessions, peg movements, rollup batches and epoch formation. Validity
rules are re-derived here from hashes and signatures rather than calling
the protocol's validators; only script evaluation is shared, since the
script language has a single semantics.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterable

from ..chain import GENESIS_HASH, Block
from ..constants import MAX_DATUM_BYTES, quorum_size
from ..crypto import Digest, VrfOutput, address_of, hash256, merkle_root, verify_sig, vrf_verify
from ..ledger import Output, OutputRef, ScriptContext, ScriptError, Transaction, eval_script

FINDING_KINDS = (
    "DuplicateSpend",
    "MixedTerminalSession",
    "InvalidCommittedBlock",
    "ConservationViolation",
    "StateMismatch",
    "LockResidue",
    "Equivocation",
    "PegImbalance",
    "RollupUnsound",
    "UnjustifiedRollback",
    "BadEpoch",
)


@dataclass(frozen=True)
class Finding:
    kind: str
    detail: str
    slot: int | None = None
    epoch: int | None = None
    shard: int | None = None

    def to_json(self) -> dict:
        return {"kind": self.kind, "detail": self.detail, "slot": self.slot, "epoch": self.epoch, "shard": self.shard}

    def __str__(self) -> str:
        where = " ".join(f"{k}={v}" for k, v in (("epoch", self.epoch), ("slot", self.slot), ("shard", self.shard)) if v is not None)
        return f"{self.kind} [{where}] {self.detail}"


@dataclass
class AuditReport:
    findings: list[Finding] = field(default_factory=list)
    stats: dict[str, int] = field(default_factory=dict)

    @property
    def clean(self) -> bool:
        return not self.findings

    def kinds(self) -> set[str]:
        return {f.kind for f in self.findings}

    def by_kind(self, kind: str) -> list[Finding]:
        return [f for f in self.findings if f.kind == kind]

    def to_json(self) -> dict:
        return {"clean": self.clean, "findings": [f.to_json() for f in self.findings], "stats": dict(sorted(self.stats.items()))}

    def render(self) -> str:
        lines = [f"{k}: {v}" for k, v in sorted(self.stats.items())]
        if self.clean:
            lines.append("clean: no safety findings")
        else:
            lines.append(f"{len(self.findings)} finding(s):")
            lines.extend(f"  {f}" for f in self.findings)
        return "\n".join(lines)


def _leaf(ref: OutputRef, out: Output) -> Digest:
    return hash256(ref.key + out.encoded)


def utxo_root(entries: dict[OutputRef, Output]) -> Digest:
    return merkle_root([_leaf(r, entries[r]) for r in sorted(entries, key=lambda r: r.key)])


def tx_problems(lookup, tx: Transaction, slot: int | None) -> list[str]:
    """Reasons ``tx`` may not be applied against ``lookup`` (a ref -> Output getter)."""
    problems = []
    if not tx.inputs:
        problems.append("no inputs")
    refs = [i.ref for i in tx.inputs]
    if len(set(refs)) != len(refs):
        problems.append("input listed twice")
    if slot is not None and not tx.valid_from <= slot <= tx.valid_to:
        problems.append(f"slot {slot} outside validity range")
    for n, out in enumerate(tx.outputs):
        if out.value >= 2**64 or len(out.datum) > MAX_DATUM_BYTES:
            problems.append(f"output {n} malformed")
    tid = tx.id
    signers = set()
    for n, inp in enumerate(tx.inputs):
        sig = inp.signature
        if sig is None:
            continue
        if verify_sig(sig.signer, tid, sig):
            signers.add(address_of(sig.signer))
        else:
            problems.append(f"input {n}: bad signature")
    signers = frozenset(signers)
    spent: dict[OutputRef, Output] = {}
    for n, ref in enumerate(dict.fromkeys(refs)):
        out = lookup(ref)
        if out is None:
            problems.append(f"input {ref} does not exist")
            continue
        spent[ref] = out
        same = [o for o in tx.outputs if o.validator_hash == out.validator_hash]
        ctx = ScriptContext(tx, refs.index(ref), slot if slot is not None else tx.valid_from, out,
                            same[0] if len(same) == 1 else None, signers)
        try:
            ok = eval_script(out.validator, ctx)
        except ScriptError as exc:
            ok = False
            problems.append(f"input {ref}: script error {exc}")
        if not ok:
            problems.append(f"input {ref}: validator refused")
    by_contract: dict[Digest, list[Output]] = {}
    for out in spent.values():
        if out.is_contract:
            by_contract.setdefault(out.validator_hash, []).append(out)
    for vh, outs in by_contract.items():
        if all(o.is_terminal for o in outs):
            continue
        if sum(1 for o in tx.outputs if o.validator_hash == vh) != 1:
            problems.append(f"contract {vh.hex()[:12]} does not continue exactly once")
    if len(spent) == len(set(refs)):
        total_in = sum(o.value for o in spent.values())
        total_out = sum(o.value for o in tx.outputs) + tx.fee
        if total_in != total_out:
            problems.append(f"value in {total_in} != out {total_out}")
    return problems


@dataclass
class _Session:
    tx: Transaction
    input_shards: set[int]
    output_shard: int
    deadline: int
    committed: set[int] = field(default_factory=set)
    rolled_back: set[int] = field(default_factory=set)
    lock_refs: dict[int, tuple[OutputRef, ...]] = field(default_factory=dict)
    checked: bool = False


@dataclass
class _Batch:
    index: int
    prev: Digest
    post: Digest
    txs: tuple[Transaction, ...]
    status: str = "Pending"


class Auditor:
    def __init__(self) -> None:
        self.report = AuditReport()
        self.shards: dict[int, dict[OutputRef, Output]] = {}
        self.tips: dict[int, Digest] = {}
        self.seen_prev: dict[tuple[int, Digest], Digest] = {}
        self.spent: dict[OutputRef, str] = {}
        self.genesis_value = 0
        self.fees = 0
        self.members: dict[int, dict[int, set[Digest]]] = {}
        self.byzantine: dict[int, set[Digest]] = {}
        self.epoch_rand: dict[int, tuple[Digest, Digest]] = {}   # epoch -> (randomness, urs)
        self.prev_global: tuple[int, Digest] | None = None
        self.sessions: dict[str, _Session] = {}
        self.locks: dict[OutputRef, tuple[str, int, int]] = {}  # ref -> (session, shard, deadline)
        self.residue_reported: set[OutputRef] = set()
        self.slot = 0
        self.epoch: int | None = None
        # peg
        self.bridge: Digest | None = None
        self.child: dict[OutputRef, Output] = {}
        self.pending_mint = 0
        self.pending_unlock = 0
        # rollup
        self.rollup_genesis: dict[OutputRef, Output] | None = None
        self.batches: list[_Batch] = []
        self.stats = {"blocks": 0, "transactions": 0, "sessions": 0, "epochs": 0, "peg_ops": 0, "rollup_batches": 0}

    def flag(self, kind: str, detail: str, shard: int | None = None) -> None:
        self.report.findings.append(Finding(kind, detail, self.slot, self.epoch, shard))

    # --- dispatch -------------------------------------------------------------

    def feed(self, ev: dict) -> None:
        if "slot" in ev and ev["slot"] != self.slot:
            self.slot = ev["slot"]
            self._check_residue()
        if "epoch" in ev and ev.get("type") != "epoch_end":
            self.epoch = ev["epoch"]
        handler = getattr(self, "_on_" + ev["type"], None)
        if handler is not None:
            handler(ev)

    def finish(self) -> AuditReport:
        for sid, s in sorted(self.sessions.items()):
            if s.committed and s.rolled_back:
                self.flag("MixedTerminalSession",
                          f"session {sid[:12]} committed on {sorted(s.committed)} and rolled back on {sorted(s.rolled_back)}")
        self.report.stats = dict(self.stats)
        return self.report

    # --- genesis and epochs -----------------------------------------------------

    def _on_genesis(self, ev: dict) -> None:
        entries = {OutputRef.from_json(k): Output.from_json(v) for k, v in ev["utxo"].items()}
        self.shards[ev["shard"]] = entries
        self.genesis_value += sum(o.value for o in entries.values())

    def _on_epoch(self, ev: dict) -> None:
        self.stats["epochs"] += 1
        n = ev["epoch"]
        rand = bytes.fromhex(ev["randomness"])
        difficulty, k = ev["difficulty"], ev["shard_count"]
        if self.prev_global is not None:
            prev_urs = self.epoch_rand[self.prev_global[0]][1]
            if rand != hash256(prev_urs + self.prev_global[1]):
                self.flag("BadEpoch", f"epoch {n} randomness does not follow from epoch {self.prev_global[0]}")
        admitted = {}
        for ident in ev["identities"]:
            pk = bytes.fromhex(ident["public_key"])
            ip = bytes(int(x) for x in ident["ip"].split("."))
            h = hash256(rand + ip + pk + struct.pack(">Q", ident["nonce"]))
            zeros = 256 - int.from_bytes(h, "big").bit_length()
            if h.hex() != ident["pow_hash"] or zeros < difficulty:
                self.flag("BadEpoch", f"identity {pk.hex()[:12]} has invalid proof of work")
                continue
            admitted[address_of(pk)] = h
        values = []
        best = None
        for t in ev["tickets"]:
            pk = bytes.fromhex(t["public"])
            out = VrfOutput.from_json({k2: v for k2, v in t.items() if k2 != "public"})
            if address_of(pk) not in admitted or not vrf_verify(pk, rand, out):
                continue
            values.append(out.value)
            if best is None or out.value < best[0]:
                best = (out.value, address_of(pk))
        urs = hash256(b"".join(sorted(values)))
        self.epoch_rand[n] = (rand, urs)
        if best is None or best[1].hex() != ev["coordinator"]:
            self.flag("BadEpoch", f"epoch {n} coordinator is not the smallest VRF value")
        salt = ev["salt"]
        members = {int(s): {bytes.fromhex(a) for a in m} for s, m in ev["membership"].items()}
        for s, addrs in members.items():
            for a in addrs:
                h = admitted.get(a)
                if h is None:
                    self.flag("BadEpoch", f"member {a.hex()[:12]} of shard {s} has no valid identity", s)
                    continue
                if salt:
                    h = hash256(h + urs + struct.pack(">I", salt))
                if int.from_bytes(h, "big") & (k - 1) != s:
                    self.flag("BadEpoch", f"member {a.hex()[:12]} placed in the wrong shard", s)
        if sum(len(m) for m in members.values()) != len(admitted):
            self.flag("BadEpoch", f"epoch {n} roster omits admitted identities")
        self.members[n] = members
        self.byzantine[n] = {bytes.fromhex(a) for a in ev.get("byzantine", [])}

    def _on_epoch_end(self, ev: dict) -> None:
        roots = [bytes.fromhex(r) for r in ev["shard_roots"]]
        for s, r in enumerate(roots):
            if self.tips.get(s, GENESIS_HASH) != r:
                self.flag("InvalidCommittedBlock", f"epoch summary names {r.hex()[:12]}, not the shard tip", s)
        g = bytes.fromhex(ev["global_root"])
        if merkle_root(roots) != g:
            self.flag("BadEpoch", "global root is not the Merkle root of the shard tips")
        self.prev_global = (ev["epoch"], g)

    # --- blocks -------------------------------------------------------------------

    def _spend(self, entries: dict, ref: OutputRef, where: str, shard: int) -> None:
        if ref in self.spent:
            self.flag("DuplicateSpend", f"{ref} spent by {where} after {self.spent[ref]}", shard)
        self.spent[ref] = where
        entries.pop(ref, None)

    def _on_block(self, ev: dict) -> None:
        s = ev["shard"]
        block = Block.from_json(ev["block"])
        h = block.header
        self.stats["blocks"] += 1
        tag = f"block {h.block_hash.hex()[:12]}"
        members = self.members.get(self.epoch, {}).get(s, set())
        voters = set()
        for v in block.votes:
            if v.voter in members and address_of(v.signature.signer) == v.voter and verify_sig(v.signature.signer, h.block_hash, v.signature):
                voters.add(v.voter)
        if not members or len(voters) < quorum_size(len(members)):
            self.flag("InvalidCommittedBlock", f"{tag} lacks a quorum of member votes ({len(voters)})", s)
        key = (s, h.prev_hash)
        if key in self.seen_prev and self.seen_prev[key] != h.block_hash:
            self.flag("Equivocation", f"{tag} and {self.seen_prev[key].hex()[:12]} both extend {h.prev_hash.hex()[:12]}", s)
            return
        self.seen_prev[key] = h.block_hash
        problems = []
        if hash256(h.hashed_fields()) != h.block_hash:
            problems.append("header hash mismatch")
        if merkle_root([t.id for t in block.transactions]) != h.tx_root:
            problems.append("transaction root mismatch")
        if h.prev_hash != self.tips.get(s, GENESIS_HASH):
            problems.append("does not extend the shard tip")
        entries = self.shards.setdefault(s, {})
        staged = dict(entries)
        for n, tx in enumerate(block.transactions):
            locked = [r for r in tx.refs if r in self.locks]
            if locked:
                problems.append(f"tx {n} spends locked {locked[0]}")
            bad = tx_problems(staged.get, tx, h.timestamp)
            problems.extend(f"tx {n}: {p}" for p in bad)
            for r in tx.refs:
                staged.pop(r, None)
            staged.update(tx.out_refs())
        if problems:
            self.flag("InvalidCommittedBlock", f"{tag}: {problems[0]}", s)
        # the shard applied the block either way; follow it
        for tx in block.transactions:
            self.stats["transactions"] += 1
            self.fees += tx.fee
            for r in tx.refs:
                if r in entries or r in self.spent:
                    self._spend(entries, r, f"tx {tx.id.hex()[:12]}", s)
            entries.update(tx.out_refs())
        self.tips[s] = h.block_hash

    # --- cross-shard sessions -------------------------------------------------------

    def _on_xs_init(self, ev: dict) -> None:
        self.stats["sessions"] += 1
        tx = Transaction.from_json(ev["tx"])
        self.sessions[ev["session"]] = _Session(tx, set(ev["input_shards"]), ev["output_shard"], ev["deadline"])

    def _on_xs_lock(self, ev: dict) -> None:
        sess = self.sessions.get(ev["session"])
        if sess is None or ev["verdict"] != "ACCEPT":
            return
        refs = tuple(OutputRef.from_json(r) for r in ev["refs"])
        sess.lock_refs[ev["shard"]] = refs
        entries = self.shards.get(ev["shard"], {})
        for r in refs:
            if r not in entries:
                self.flag("DuplicateSpend", f"session {ev['session'][:12]} locked missing {r}", ev["shard"])
            if r in self.locks and self.locks[r][0] != ev["session"]:
                self.flag("DuplicateSpend", f"{r} locked by two sessions", ev["shard"])
            self.locks[r] = (ev["session"], ev["shard"], ev["deadline"])

    def _release(self, sid: str, shard: int) -> None:
        for r, (owner, s, _) in list(self.locks.items()):
            if owner == sid and s == shard:
                del self.locks[r]

    def _on_xs_commit(self, ev: dict) -> None:
        sid, s = ev["session"], ev["shard"]
        sess = self.sessions.get(sid)
        if sess is None:
            return
        if s in sess.committed:
            return
        if not sess.checked:
            sess.checked = True
            located = {}
            for shard, entries in self.shards.items():
                for r in sess.tx.refs:
                    if r in entries:
                        located[r] = entries[r]
            bad = tx_problems(located.get, sess.tx, None)
            if bad:
                self.flag("InvalidCommittedBlock", f"session {sid[:12]} committed an invalid tx: {bad[0]}", s)
            if len(sess.lock_refs) != len(sess.input_shards):
                self.flag("MixedTerminalSession", f"session {sid[:12]} committed without every input locked", s)
            self.fees += sess.tx.fee
        sess.committed.add(s)
        entries = self.shards.setdefault(s, {})
        for r in sess.lock_refs.get(s, ()):
            self._spend(entries, r, f"session {sid[:12]}", s)
        self._release(sid, s)
        if s == sess.output_shard:
            entries.update(sess.tx.out_refs())

    def _on_xs_rollback(self, ev: dict) -> None:
        sess = self.sessions.get(ev["session"])
        if sess is None:
            return
        sess.rolled_back.add(ev["shard"])
        self._release(ev["session"], ev["shard"])

    def _check_residue(self) -> None:
        for r, (sid, s, deadline) in self.locks.items():
            if deadline + 1 < self.slot and r not in self.residue_reported:
                self.residue_reported.add(r)
                self.flag("LockResidue", f"{r} still locked by {sid[:12]} past deadline {deadline}", s)

    # --- layer 2 ---------------------------------------------------------------------

    def _on_peg_setup(self, ev: dict) -> None:
        self.bridge = bytes.fromhex(ev["bridge"])
        self.peg_shard = ev["shard"]

    def _on_peg(self, ev: dict) -> None:
        self.stats["peg_ops"] += 1
        op = ev["op"]
        if op == "mint":
            ref, out = OutputRef.from_json(ev["ref"]), Output.from_json(ev["output"])
            self.child[ref] = out
            self.pending_mint -= out.value
            return
        tx = Transaction.from_json(ev["tx"])
        if op in ("lock", "unlock"):
            entries = self.shards[self.peg_shard]
            bad = tx_problems(entries.get, tx, None)
            if bad:
                self.flag("PegImbalance", f"peg {op} tx invalid on the parent: {bad[0]}", self.peg_shard)
            for r in tx.refs:
                if r in entries or r in self.spent:
                    self._spend(entries, r, f"peg {op}", self.peg_shard)
            entries.update(tx.out_refs())
            if op == "lock":
                self.pending_mint += tx.outputs[0].value
            else:
                self.pending_unlock -= tx.outputs[0].value
        else:
            bad = tx_problems(self.child.get, tx, None)
            if bad:
                self.flag("PegImbalance", f"child {op} tx invalid: {bad[0]}")
            for r in tx.refs:
                self.child.pop(r, None)
            self.child.update(tx.out_refs())
            if op == "burn":
                self.pending_unlock += tx.fee

    def _on_peg_state(self, ev: dict) -> None:
        held = sum(o.value for o in self.shards[self.peg_shard].values() if o.owner == self.bridge)
        claims = sum(o.value for o in self.child.values()) + self.pending_mint + self.pending_unlock
        if held != claims:
            self.flag("PegImbalance", f"bridge holds {held} against {claims} claimed", self.peg_shard)
        reported = ev["child_circulating"] + ev["pending_auths"] + ev["pending_burns"]
        if ev["parent_locked"] != held or reported != claims:
            self.flag("PegImbalance", "reported peg state differs from replay", self.peg_shard)

    def _on_rollup_setup(self, ev: dict) -> None:
        self.rollup_genesis = {OutputRef.from_json(k): Output.from_json(v) for k, v in ev["genesis"].items()}

    def _on_rollup_commit(self, ev: dict) -> None:
        self.stats["rollup_batches"] += 1
        txs = tuple(Transaction.from_json(t) for t in ev["transactions"])
        if merkle_root([t.id for t in txs]) != bytes.fromhex(ev["tx_data_root"]):
            self.flag("RollupUnsound", f"batch {ev['batch_index']} data does not match its root")
        self.batches.append(_Batch(ev["batch_index"], bytes.fromhex(ev["prev_state_root"]),
                                   bytes.fromhex(ev["post_state_root"]), txs))

    def _honest(self, upto: int) -> tuple[dict, Digest]:
        """Honest state before batch ``upto`` (live batches only) and its root."""
        state = dict(self.rollup_genesis)
        for b in self.batches[:upto]:
            if b.status == "RolledBack":
                continue
            for tx in b.txs:
                if not tx_problems(state.get, tx, None):
                    for r in tx.refs:
                        del state[r]
                    state.update(tx.out_refs())
        return state, utxo_root(state)

    def _batch_is_wrong(self, b: _Batch) -> bool:
        pre, root = self._honest(b.index)
        if root != b.prev:
            return True
        post = dict(pre)
        for tx in b.txs:
            if not tx_problems(post.get, tx, None):
                for r in tx.refs:
                    del post[r]
                post.update(tx.out_refs())
        return utxo_root(post) != b.post

    def _on_rollup_rollback(self, ev: dict) -> None:
        target = self.batches[ev["batch"]]
        if target.status != "Pending" or not self._batch_is_wrong(target):
            self.flag("UnjustifiedRollback", f"batch {target.index} was rolled back without fault")
        expected = [b.index for b in self.batches[target.index:] if b.status == "Pending"]
        if ev["rolled_back"] != expected:
            self.flag("UnjustifiedRollback", f"rolled back {ev['rolled_back']}, expected {expected}")
        for i in ev["rolled_back"]:
            self.batches[i].status = "RolledBack"

    def _on_rollup_finalized(self, ev: dict) -> None:
        for i in ev["batches"]:
            b = self.batches[i]
            if self._batch_is_wrong(b):
                self.flag("RollupUnsound", f"batch {i} finalized with a wrong state root")
            b.status = "Finalized"

    # --- end of run --------------------------------------------------------------------

    def _on_final(self, ev: dict) -> None:
        self._check_residue()
        for s, roots in ev["locks"].items():
            for r in roots:
                ref = OutputRef.from_json(r)
                if ref not in self.residue_reported and ref in self.locks and self.locks[ref][2] < self.slot:
                    self.flag("LockResidue", f"{r} still locked at the end of the run", int(s))
        for s, root in ev["utxo_digest"].items():
            if utxo_root(self.shards.get(int(s), {})).hex() != root:
                self.flag("StateMismatch", "final shard state differs from the replayed one", int(s))
        total = sum(o.value for e in self.shards.values() for o in e.values())
        # peg burns leave the parent through unlocks, never through shard fees
        if total != self.genesis_value - self.fees:
            self.flag("ConservationViolation", f"shards hold {total}, expected {self.genesis_value - self.fees}")


def audit_run(events: Iterable[dict]) -> AuditReport:
    """Replay ``events`` (parsed transcript lines) and report safety findings."""
    auditor = Auditor()
    for ev in events:
        auditor.feed(ev)
    return auditor.finish()
