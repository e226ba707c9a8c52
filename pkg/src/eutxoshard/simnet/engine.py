"""Epoch-driven simulation of shards, clients and adversaries.

One slot runs as: epoch formation (at epoch boundaries), workload
emission, delivery of every event due this slot, one block attempt per
shard, layer-2 work, timeout sweeps, and epoch finalization on the last
slot of an epoch. Block attempts may run on worker threads; their results
are merged in shard order so the transcript never depends on scheduling.
"""
from __future__ import annotations

import csv
import io
import random
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any

from ..chain import GENESIS_HASH, Block, build_block, validate_block, vote_on
from ..constants import quorum_size
from ..crossshard import (
    AbortCertificate, CrossShardError, CrossShardSession, SessionState,
    ShardLedger, ShardProof, Verdict, client_commit, initiate, shard_lock, shard_unlock,
    timeout_sweep,
)
from ..crypto import Digest, KeyPair, hash256, keygen
from ..layer2 import (
    BatchStatus, Chain, Peg, PegError, Rollup, RollupError, challenge_all, fraud_verify, peg_burn,
    peg_lock, peg_mint, peg_unlock, replay_state, rollup_commit, rollup_finalize, state_root,
)
from ..ledger import (
    LedgerError, Output, OutputRef, Transaction, TxInput, UtxoSet, apply_tx, apply_txs, counter_datum,
    counter_validator, force_apply, pay_to, validate_tx,
)
from ..sharding import (
    EpochContext, NodeIdentity, finalize_epoch, form_epoch, leading_zero_bits,
    next_epoch_randomness, pow_hash, route_tx, trailing_bits, vrf_ticket,
)
from .config import ScenarioConfig
from .scheduler import Scheduler
from .transcript import Transcript, canonical_json
from .workload import COIN_VALUE, WorkloadGenerator

CONTRACT_LIMIT = 32
DSS = "dss"
ROLLUP = "rollup"


def run_config_json(cfg: ScenarioConfig) -> dict:
    """Config as recorded in results; ``parallel`` is left out since it must not change them."""
    out = cfg.to_json()
    out.pop("parallel")
    return out


def derive(seed: int, *labels: Any) -> bytes:
    tag = b"|".join(str(x).encode() for x in labels)
    return hash256(struct.pack(">Q", seed) + tag)


def derive_int(seed: int, *labels: Any) -> int:
    return int.from_bytes(derive(seed, *labels)[:8], "big")


def grind_key(seed: int, label: str, shard: int, shard_count: int) -> KeyPair:
    """First derived key whose address is homed on ``shard``."""
    n = 0
    while True:
        k = keygen(derive(seed, label, shard, n))
        if trailing_bits(k.address, shard_count) == shard:
            return k
        n += 1


def epoch_record(ctx: EpochContext, identities, tickets, difficulty: int, min_shard_size: int) -> dict:
    """Transcript entry publishing everything needed to re-derive an epoch."""
    return {
        "type": "epoch",
        "randomness": ctx.randomness.hex(),
        "difficulty": difficulty,
        "min_shard_size": min_shard_size,
        "shard_count": ctx.shard_count,
        "identities": [i.to_json() for i in identities],
        "tickets": [{"public": pk.hex(), **out.to_json()} for pk, out in tickets],
        "membership": {str(s): [a.hex() for a in ctx.membership[s]] for s in range(ctx.shard_count)},
        "coordinator": ctx.coordinator.hex(),
        "dss": ctx.dss_index,
        "salt": ctx.salt,
        "context_digest": ctx.digest().hex(),
    }


@dataclass
class Node:
    index: int
    key: KeyPair
    ip: bytes
    behavior: str

    @property
    def byzantine(self) -> bool:
        return self.behavior != "Honest"

    @property
    def signs_anything(self) -> bool:
        return self.behavior in ("ByzSignInvalid", "ByzEquivocate")

    @property
    def silent(self) -> bool:
        return self.behavior == "ByzSilent"


@dataclass
class EpochMetrics:
    epoch: int
    shard_sizes: list[int]
    byzantine_per_shard: list[int]
    committed: list[int]
    blocks: list[int]
    # commits during the settling slots after the last epoch, kept out of throughput
    drain_committed: list[int] = field(default_factory=list)
    sessions: dict[str, int] = field(default_factory=lambda: {"Committed": 0, "RolledBack": 0})
    invalid_blocks_rejected: int = 0
    invalid_blocks_committed: int = 0
    equivocations_committed: int = 0
    dropped_txs: int = 0
    locked_residue: int = 0
    coordinator_rejected: bool = False
    peg_ops: int = 0
    rollup_batches: int = 0
    rollup_rollbacks: int = 0

    def to_json(self) -> dict:
        return {
            "epoch": self.epoch,
            "shard_sizes": self.shard_sizes,
            "byzantine_per_shard": self.byzantine_per_shard,
            "committed": self.committed,
            "drain_committed": self.drain_committed,
            "blocks": self.blocks,
            "sessions": dict(sorted(self.sessions.items())),
            "invalid_blocks_rejected": self.invalid_blocks_rejected,
            "invalid_blocks_committed": self.invalid_blocks_committed,
            "equivocations_committed": self.equivocations_committed,
            "dropped_txs": self.dropped_txs,
            "locked_residue": self.locked_residue,
            "coordinator_rejected": self.coordinator_rejected,
            "peg_ops": self.peg_ops,
            "rollup_batches": self.rollup_batches,
            "rollup_rollbacks": self.rollup_rollbacks,
        }

    @property
    def max_byzantine_share(self) -> float:
        return max((b / s for b, s in zip(self.byzantine_per_shard, self.shard_sizes) if s), default=0.0)


CSV_COLUMNS = [
    "epoch", "committed_total", "committed_per_shard", "blocks", "sessions_committed",
    "sessions_rolled_back", "invalid_blocks_rejected", "invalid_blocks_committed",
    "equivocations_committed", "locked_residue", "max_byzantine_share", "peg_ops",
    "rollup_batches", "rollup_rollbacks",
]


@dataclass
class SimResult:
    config: ScenarioConfig
    epochs: list[EpochMetrics]
    totals: dict
    transcript: Transcript
    digest: str = ""

    def metrics_json(self) -> dict:
        return {
            "config": run_config_json(self.config),
            "epochs": [e.to_json() for e in self.epochs],
            "totals": self.totals,
            "transcript_digest": self.transcript.digest(),
        }

    def compute_digest(self) -> str:
        return hash256(canonical_json(self.metrics_json()).encode()).hex()

    def to_json(self) -> dict:
        return {**self.metrics_json(), "digest": self.digest}

    def committed_per_epoch(self) -> float:
        if not self.epochs:
            return 0.0
        return sum(sum(e.committed) for e in self.epochs) / len(self.epochs)

    def epochs_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for e in self.epochs:
            w.writerow([
                e.epoch, sum(e.committed), " ".join(map(str, e.committed)), sum(e.blocks),
                e.sessions["Committed"], e.sessions["RolledBack"], e.invalid_blocks_rejected,
                e.invalid_blocks_committed, e.equivocations_committed, e.locked_residue,
                f"{e.max_byzantine_share:.4f}", e.peg_ops, e.rollup_batches, e.rollup_rollbacks,
            ])
        return buf.getvalue()


@dataclass
class _ShardRuntime:
    ledger: ShardLedger
    tip: Digest = GENESIS_HASH
    height: int = 0
    mempool: dict[Digest, Transaction] = field(default_factory=dict)


@dataclass
class _Attempt:
    """Outcome of one shard's block attempt, merged on the driver thread."""

    shard: int
    events: list[dict] = field(default_factory=list)
    committed: list[Transaction] = field(default_factory=list)
    dropped: list[Transaction] = field(default_factory=list)
    block: bool = False
    invalid_rejected: int = 0
    invalid_committed: int = 0
    equivocation: int = 0


@dataclass
class _ClientSession:
    session: CrossShardSession
    client: int
    located: dict
    proofs: dict[int, ShardProof] = field(default_factory=dict)
    done: bool = False


class Simulation:
    def __init__(self, cfg: ScenarioConfig, transcript_path=None, keep_transcript: bool = True):
        self.cfg = cfg
        self.k = cfg.shard_count
        self.transcript = Transcript(transcript_path, keep=keep_transcript)
        self.transcript.add({"type": "config", "config": run_config_json(cfg)})
        self.sched = Scheduler(derive_int(cfg.seed, "latency"), cfg.latency.min, cfg.latency.max, cfg.reorder)
        self.rng = random.Random(derive_int(cfg.seed, "workload"))
        self.slot = 0
        self.epoch_index = -1
        self.ctx: EpochContext | None = None
        self.contexts: dict[int, EpochContext] = {}
        self.metrics: list[EpochMetrics] = []
        self.sessions: dict[Digest, _ClientSession] = {}
        self.counted: set[Digest] = set()
        self.draining = False
        self.pool = ThreadPoolExecutor(max_workers=max(1, self.k)) if cfg.parallel else None
        self._build_nodes()
        self._build_genesis()
        self._register_actors()

    # --- setup ------------------------------------------------------------

    def _build_nodes(self) -> None:
        cfg = self.cfg
        order = list(range(cfg.nodes))
        random.Random(derive_int(cfg.seed, "byzantine")).shuffle(order)
        byz = set(order[: round(cfg.nodes * cfg.byzantine_fraction)])
        self.nodes = []
        for i in range(cfg.nodes):
            ip = bytes([10, (i >> 16) & 255, (i >> 8) & 255, i & 255])
            behavior = cfg.byzantine_behavior if i in byz else "Honest"
            self.nodes.append(Node(i, keygen(derive(cfg.seed, "node", i)), ip, behavior))
        self.by_address = {n.key.address: n for n in self.nodes}
        self.randomness = derive(cfg.seed, "genesis-randomness")

    def _build_genesis(self) -> None:
        cfg, k = self.cfg, self.k
        clients = [grind_key(cfg.seed, f"client-{j}", j % k, k) for j in range(cfg.clients)]
        self.clients = clients
        vanishing = round(cfg.clients * cfg.vanishing_client_fraction)
        self.vanishing = set(range(cfg.clients - vanishing, cfg.clients))
        self.gen = WorkloadGenerator(self.rng, clients, k, frozenset(self.vanishing))
        outputs: dict[int, list[Output]] = {s: [] for s in range(k)}
        for j, key in enumerate(clients):
            home = j % k
            for c in range(cfg.coins_per_client):
                # half the coins sit at home, the rest spread over the other shards
                shard = home if c % 2 == 0 or k == 1 else (home + 1 + c // 2) % k
                outputs[shard].append(Output(pay_to(key.address), COIN_VALUE))
        contracts = []
        for c in range(cfg.contracts):
            v = counter_validator(CONTRACT_LIMIT, salt=b"sim-%d" % c)
            shard = trailing_bits(v.hash, k)
            outputs[shard].append(Output(v, 100, counter_datum(0)))
            contracts.append((v, shard, len(outputs[shard]) - 1))
        # layer 2: the peg and rollup live on shard 0
        self.peg = None
        self.rollup = None
        if cfg.workload.peg_op > 0:
            self.bridge = grind_key(cfg.seed, "bridge", 0, k)
            self.peg_users = [grind_key(cfg.seed, "peg-user-%d" % i, 0, k) for i in range(3)]
            for u in self.peg_users:
                outputs[0].extend(Output(pay_to(u.address), 100) for _ in range(4))
        self.shards: list[_ShardRuntime] = []
        for s in range(k):
            utxo = UtxoSet.genesis(outputs[s], tag=derive(cfg.seed, "genesis", s))
            self.shards.append(_ShardRuntime(ShardLedger(s, utxo, commit_margin=cfg.latency.max)))
            self.transcript.add({"type": "genesis", "shard": s, "utxo": utxo.to_json()})
            for ref, out in sorted(utxo.items()):
                self.gen.add_coin(ref, out, s)
        for v, shard, idx in contracts:
            utxo = self.shards[shard].ledger.utxo
            ref = OutputRef(hash256(derive(cfg.seed, "genesis", shard)), idx)
            self.gen.add_contract(v, shard, CONTRACT_LIMIT, ref, utxo[ref])
        if self.peg_users_present:
            parent = _LedgerChain(b"shard-0", self.shards[0].ledger)
            self.peg = Peg(parent, Chain(b"child"), self.bridge, cfg.validation_period)
            self.transcript.add({"type": "peg_setup", "shard": 0, "bridge": self.bridge.address.hex()})
        if cfg.workload.rollup_batch > 0:
            self.rollup_users = [keygen(derive(cfg.seed, "rollup-user", i)) for i in range(4)]
            genesis = UtxoSet.genesis(
                [Output(pay_to(u.address), 500) for u in self.rollup_users], tag=derive(cfg.seed, "rollup")
            )
            self.rollup_genesis = genesis
            self.rollup = Rollup(state_root(genesis), validation_period=cfg.validation_period)
            self.challenged: set[int] = set()
            batchers = [n for n in self.nodes if n.behavior == "ByzFraudulentBatcher"]
            self.operator = batchers[0] if batchers else self.nodes[0]
            self.transcript.add({
                "type": "rollup_setup", "shard": 0, "genesis": genesis.to_json(),
                "operator": self.operator.key.address.hex(),
            })

    @property
    def peg_users_present(self) -> bool:
        return self.cfg.workload.peg_op > 0

    def _register_actors(self) -> None:
        for s in range(self.k):
            self.sched.register(f"shard:{s}", self._on_shard)
        for j in range(len(self.clients)):
            self.sched.register(f"client:{j}", self._on_client)
        self.sched.register(DSS, self._on_dss)
        self.sched.register(ROLLUP, self._on_rollup)

    # --- helpers ------------------------------------------------------------

    def members_of(self, epoch: int, shard: int):
        return self.contexts[epoch].membership[shard]

    def committee(self, shard: int) -> list[Node]:
        return [self.by_address[a] for a in self.ctx.membership[shard]]

    def _em(self) -> EpochMetrics:
        return self.metrics[-1]

    def _log(self, event: dict) -> None:
        self.transcript.add({"slot": self.slot, "epoch": self.epoch_index, **event})

    # --- epochs -------------------------------------------------------------

    def _identity(self, node: Node) -> NodeIdentity:
        cfg = self.cfg
        # byzantine nodes keep grinding until the hash also lands in the target shard
        target = cfg.byzantine_target_shard if node.byzantine else None
        nonce = 0
        while True:
            h = pow_hash(self.randomness, node.ip, node.key.public, nonce)
            if leading_zero_bits(h) >= cfg.difficulty and (target is None or trailing_bits(h, self.k) == target):
                return NodeIdentity(node.key.public, node.ip, nonce, h, self.epoch_index)
            nonce += 1

    def _begin_epoch(self) -> None:
        cfg = self.cfg
        self.epoch_index += 1
        identities = [self._identity(n) for n in self.nodes]
        tickets = [vrf_ticket(n.key, self.randomness) for n in self.nodes]
        ctx = form_epoch(
            self.epoch_index, self.randomness, identities, tickets, self.k, cfg.difficulty, cfg.min_shard_size
        )
        rejected = False
        coordinator = self.by_address[ctx.coordinator]
        if coordinator.behavior == "ByzBadCoordinator" and self.k > 1:
            # the coordinator announces a rotated roster; every honest node
            # recomputes the epoch from published data and refuses it
            bogus = replace(ctx, membership={s: ctx.membership[(s + 1) % self.k] for s in range(self.k)})
            rejected = bogus.digest() != ctx.digest()
        self.ctx = ctx
        self.contexts[ctx.epoch_number] = ctx
        byz = [sum(self.by_address[a].byzantine for a in ctx.membership[s]) for s in range(self.k)]
        self.metrics.append(EpochMetrics(
            ctx.epoch_number, [len(ctx.membership[s]) for s in range(self.k)], byz,
            [0] * self.k, [0] * self.k, [0] * self.k, coordinator_rejected=rejected,
        ))
        self._log({
            **epoch_record(ctx, identities, tickets, cfg.difficulty, cfg.min_shard_size),
            "coordinator_rejected": rejected,
            "byzantine": sorted(n.key.address.hex() for n in self.nodes if n.byzantine),
        })

    def _end_epoch(self) -> None:
        tips = {s: self.shards[s].tip for s in range(self.k)}
        summary = finalize_epoch(self.epoch_index, tips, self.k)
        em = self._em()
        em.locked_residue = self._residue()
        self._log({"type": "epoch_end", **summary.to_json()})
        self.randomness = next_epoch_randomness(self.ctx.urs, summary.global_root)

    def _residue(self) -> int:
        n = 0
        for sh in self.shards:
            for r, sid in sh.ledger.locks.items():
                if sh.ledger.sessions[sid].deadline + 1 < self.slot:
                    n += 1
        return n

    # --- workload -----------------------------------------------------------

    def _draws(self, rate: float) -> int:
        whole = int(rate)
        return whole + (1 if self.rng.random() < rate - whole else 0)

    def _emit(self) -> None:
        w = self.cfg.workload
        self.gen.release_returns(self.slot)
        for s in range(self.k):
            for _ in range(self._draws(w.intra_shard_payment)):
                tx = self.gen.intra(s)
                if tx is None:
                    break
                self.sched.send(f"client:{self._client_of(tx)}", DSS, ("tx", tx))
        for _ in range(self._draws(w.contract_step)):
            step = self.gen.contract_step()
            if step is None:
                break
            self.sched.send("client:0", DSS, ("tx", step[1]))
        if self.k > 1:
            for _ in range(self._draws(w.cross_shard_payment)):
                made = self.gen.cross()
                if made is None:
                    break
                self._open_session(*made)
        if self.peg is not None:
            for _ in range(self._draws(w.peg_op)):
                self._peg_op()
        if self.rollup is not None:
            for _ in range(self._draws(w.rollup_batch)):
                self._rollup_batch()

    def _client_of(self, tx: Transaction) -> int:
        return self.gen.by_address[tx.sender]

    def _open_session(self, tx: Transaction, located: dict) -> None:
        client = self._client_of(tx)
        try:
            session = initiate(tx, self.k, located.__getitem__, self.slot, self.cfg.lock_period)
        except CrossShardError:
            # both coins turned out to sit on the output shard; send it normally
            self.sched.send(f"client:{client}", DSS, ("tx", tx))
            return
        cs = _ClientSession(session, client, located)
        self.sessions[session.id] = cs
        src = f"client:{client}"
        self._log({
            "type": "xs_init", "session": session.id.hex(), "tx": tx.to_json(),
            "input_shards": sorted(session.input_shards), "output_shard": session.output_shard,
            "deadline": session.deadline_slot, "client": client,
        })
        self.sched.send(src, f"shard:{session.output_shard}", ("xs_open", session.id, session.deadline_slot))
        for s in sorted(session.input_shards):
            self.sched.send(src, f"shard:{s}", ("lock", session))

    # --- message handlers ---------------------------------------------------

    def _on_dss(self, ev) -> None:
        kind, tx = ev.payload
        shard = route_tx(tx, self.k)
        self.sched.send(DSS, f"shard:{shard}", ("tx", tx))

    def _signers(self, shard: int) -> list[KeyPair]:
        willing = [n.key for n in self.committee(shard) if not n.silent]
        return willing[: quorum_size(len(self.ctx.membership[shard]))]

    def _on_shard(self, ev) -> None:
        s = int(ev.dst.split(":")[1])
        rt = self.shards[s]
        kind = ev.payload[0]
        if kind == "tx":
            tx = ev.payload[1]
            rt.mempool.setdefault(tx.id, tx)
        elif kind == "xs_open":
            _, sid, deadline = ev.payload
            rt.ledger.register_output(sid, deadline)
        elif kind == "lock":
            session = ev.payload[1]
            proof = shard_lock(rt.ledger, session, self.slot, self.epoch_index, self._signers(s))
            self._log({
                "type": "xs_lock", "session": session.id.hex(), "shard": s,
                "verdict": proof.verdict.name, "reason": proof.reason,
                "refs": [r.to_json() for r in proof.refs], "deadline": proof.deadline,
            })
            self.sched.send(ev.dst, ev.src, ("proof", proof))
        elif kind in ("commit", "abort"):
            cert = ev.payload[1]
            outcome = shard_unlock(rt.ledger, cert, self.slot, self.members_of)
            cs = self.sessions.get(cert.session_id)
            if outcome == "committed":
                event = {"type": "xs_commit", "session": cert.session_id.hex(), "shard": s}
                if cs is not None and s == cs.session.output_shard:
                    self.gen.observe_commit(cs.session.tx, s)
                    for other in sorted(cs.session.input_shards - {s}):
                        self.sched.send(ev.dst, f"shard:{other}", ("commit", cert))
                self._log(event)
            elif outcome == "rolled_back":
                self._log({"type": "xs_rollback", "session": cert.session_id.hex(), "shard": s, "reason": "abort"})
            elif outcome == "refused":
                self._log({"type": "xs_refused", "session": cert.session_id.hex(), "shard": s})
                rec = rt.ledger.sessions.get(cert.session_id)
                if rec is not None and rec.state is SessionState.ROLLED_BACK:
                    self._log({"type": "xs_rollback", "session": cert.session_id.hex(), "shard": s, "reason": "late"})
            self._count_terminal(cert.session_id, s)

    def _count_terminal(self, sid: Digest, shard: int) -> None:
        cs = self.sessions.get(sid)
        if cs is None or sid in self.counted or shard != cs.session.output_shard:
            return
        rec = self.shards[shard].ledger.sessions.get(sid)
        if rec is not None and rec.state.terminal:
            self.counted.add(sid)
            self._em().sessions[rec.state.value] += 1
            if rec.state is SessionState.ROLLED_BACK:
                self.gen.return_later(self.slot + self.cfg.latency.max + 1, cs.session.tx, cs.located)

    def _on_client(self, ev) -> None:
        kind, proof = ev.payload
        cs = self.sessions.get(proof.session_id)
        if cs is None or cs.done:
            return
        cs.proofs[proof.shard] = proof
        cs.session.record(proof)
        if set(cs.proofs) != set(cs.session.input_shards):
            return
        cs.done = True
        src = f"client:{cs.client}"
        rejection = next((p for p in cs.proofs.values() if p.verdict is Verdict.REJECT), None)
        if rejection is None and cs.client in self.vanishing:
            self._log({"type": "client_vanished", "session": proof.session_id.hex(), "client": cs.client})
            return
        try:
            if rejection is not None:
                raise CrossShardError("rejected")
            cert = client_commit(cs.session, cs.proofs.values(), self.members_of)
        except CrossShardError:
            rejection = rejection or next(iter(cs.proofs.values()))
            abort = AbortCertificate(proof.session_id, rejection)
            for s in sorted(cs.session.involved_shards()):
                self.sched.send(src, f"shard:{s}", ("abort", abort))
            return
        self.sched.send(src, f"shard:{cs.session.output_shard}", ("commit", cert))

    def _on_rollup(self, ev) -> None:
        kind, proof = ev.payload
        try:
            rolled = fraud_verify(self.rollup, proof)
        except RollupError as exc:
            self._log({"type": "rollup_challenge_rejected", "batch": proof.batch_index, "reason": str(exc)})
            return
        self._log({"type": "rollup_rollback", "batch": proof.batch_index, "rolled_back": rolled, "proof": proof.to_json()})
        self._em().rollup_rollbacks += len(rolled)

    # --- block production ---------------------------------------------------

    def _attempt(self, s: int) -> _Attempt:
        """One block attempt on shard ``s``. Touches only that shard's state."""
        rt = self.shards[s]
        out = _Attempt(s)
        committee = self.committee(s)
        if not committee:
            return out
        producer = committee[self.slot % len(committee)]
        if producer.silent:
            return out
        view = rt.ledger.view()
        entries = dict(view.items())
        chosen = []
        for tid, tx in list(rt.mempool.items()):
            if len(chosen) >= self.cfg.block_capacity:
                break
            if validate_tx(entries, tx, self.slot).valid:
                for r in tx.refs:
                    del entries[r]
                entries.update(tx.out_refs())
                chosen.append(tx)
            else:
                out.dropped.append(tx)
                del rt.mempool[tid]
        if producer.behavior == "ByzSignInvalid":
            theft = self._theft(entries, producer)
            if theft is not None:
                chosen.append(theft)
        if not chosen:
            return out
        block = build_block(chosen, rt.tip, self.slot, producer.key.address)
        valid = validate_block(view, block, rt.tip).valid
        need = quorum_size(len(committee))
        voters = [n for n in committee if not n.silent and (valid or n.signs_anything)][:need]
        if len(voters) < need:
            out.invalid_rejected += not valid
            out.events.append({"type": "block_rejected", "shard": s, "hash": block.hash.hex(), "valid": valid, "votes": len(voters)})
            return out
        block = block.with_votes(vote_on(block, n.key) for n in voters)
        if valid:
            rt.ledger.utxo = apply_txs(rt.ledger.utxo, block.transactions, self.slot)
        else:
            rt.ledger.utxo = force_apply(rt.ledger.utxo, block.transactions)
            out.invalid_committed += 1
        for tx in block.transactions:
            rt.mempool.pop(tx.id, None)
        out.committed = list(block.transactions)
        out.block = True
        out.events.append({"type": "block", "shard": s, "height": rt.height, "block": block.to_json()})
        if producer.behavior == "ByzEquivocate":
            twin = self._equivocate(block, committee, need)
            if twin is not None:
                out.events.append({"type": "block", "shard": s, "height": rt.height, "block": twin.to_json()})
                out.equivocation += 1
        rt.tip = block.hash
        rt.height += 1
        return out

    def _theft(self, entries: dict, producer: Node) -> Transaction | None:
        """An invalid transaction moving someone else's coin to the producer."""
        victims = sorted(r for r, o in entries.items() if o.owner is not None and o.owner != producer.key.address)
        if not victims:
            return None
        ref = victims[self.slot % len(victims)]
        tx = Transaction((TxInput(ref),), (Output(pay_to(producer.key.address), entries[ref].value),),
                         sender=producer.key.address)
        return tx.signed(producer.key)

    def _equivocate(self, block: Block, committee: list[Node], need: int) -> Block | None:
        """A second block for the same height. Honest members have already
        voted at this height, so only byzantine votes are available."""
        header = replace(block.header, nonce=1)
        twin = Block(replace(header, block_hash=header.compute_hash()), block.transactions)
        voters = [n for n in committee if n.signs_anything][:need]
        if len(voters) < need:
            return None
        return twin.with_votes(vote_on(twin, n.key) for n in voters)

    def _produce(self) -> None:
        if self.pool is not None:
            attempts = list(self.pool.map(self._attempt, range(self.k)))
        else:
            attempts = [self._attempt(s) for s in range(self.k)]
        em = self._em()
        for a in attempts:
            for e in a.events:
                self._log(e)
            for tx in a.committed:
                self.gen.observe_commit(tx, a.shard)
            for tx in a.dropped:
                self.gen.contract_dropped(tx)
            if self.draining:
                em.drain_committed[a.shard] += len(a.committed)
            else:
                em.committed[a.shard] += len(a.committed)
            em.blocks[a.shard] += a.block
            em.invalid_blocks_rejected += a.invalid_rejected
            em.invalid_blocks_committed += a.invalid_committed
            em.equivocations_committed += a.equivocation
            em.dropped_txs += len(a.dropped)

    def _sweep(self) -> None:
        for s, rt in enumerate(self.shards):
            for sid in timeout_sweep(rt.ledger, self.slot):
                self._log({"type": "xs_rollback", "session": sid.hex(), "shard": s, "reason": "timeout"})
                self._count_terminal(sid, s)

    # --- layer 2 ------------------------------------------------------------

    def _peg_op(self) -> None:
        peg, rng = self.peg, self.rng
        kind = rng.choice(["lock", "mint", "transfer", "burn", "unlock"])
        user = rng.choice(self.peg_users)
        try:
            if kind == "lock":
                view = self.shards[0].ledger.view()
                mine = sorted(r for r, o in view.items() if o.owner == user.address)
                if not mine:
                    return
                ref = rng.choice(mine)
                peg_lock(peg, ref, user, rng.randint(1, view[ref].value), self.slot)
            elif kind == "mint" and peg.pending_auths:
                peg_mint(peg, peg.pending_auths[rng.choice(sorted(peg.pending_auths))])
            elif kind == "transfer":
                mine = sorted(r for r, o in peg.child.utxo.items() if o.owner == user.address)
                if not mine:
                    return
                ref = rng.choice(mine)
                value = peg.child.utxo[ref].value
                to = rng.choice(self.peg_users)
                split = rng.randint(0, value)
                outs = (Output(pay_to(to.address), split), Output(pay_to(user.address), value - split))
                tx = Transaction((TxInput(ref),), outs, sender=user.address).signed(user)
                peg.child.utxo = apply_tx(peg.child.utxo, tx, self.slot)
                peg.journal.append(("transfer", tx))
            elif kind == "burn":
                mine = sorted(r for r, o in peg.child.utxo.items() if o.owner == user.address and o.value)
                if not mine:
                    return
                peg_burn(peg, [rng.choice(mine)], user, self.slot)
            elif kind == "unlock":
                ready = [b for b in peg.pending_burns.values() if self.slot >= b.burn_slot + peg.validation_period]
                if not ready:
                    return
                peg_unlock(peg, sorted(ready, key=lambda b: b.burn_tx_id)[0], self.slot)
        except (PegError, LedgerError) as exc:
            self._log({"type": "peg_failed", "op": kind, "reason": str(exc)})
        self._flush_peg()

    def _flush_peg(self) -> None:
        for op, item in self.peg.journal:
            if op == "mint":
                ref, out = item
                self._log({"type": "peg", "op": op, "ref": ref.to_json(), "output": out.to_json()})
            else:
                self._log({"type": "peg", "op": op, "tx": item.to_json()})
            self._em().peg_ops += 1
        self.peg.journal.clear()
        self._log({
            "type": "peg_state", "parent_locked": self.peg.parent_locked(),
            "child_circulating": self.peg.child.utxo.total_value(),
            "pending_auths": sum(a.amount for a in self.peg.pending_auths.values()),
            "pending_burns": sum(b.amount for b in self.peg.pending_burns.values()),
        })

    def _rollup_batch(self) -> None:
        rng = self.rng
        state = self._rollup_state()
        batch = []
        for _ in range(rng.randint(1, 3)):
            user = rng.choice(self.rollup_users)
            mine = sorted(r for r, o in state.items() if o.owner == user.address and o.value > 0)
            if not mine:
                continue
            ref = rng.choice(mine)
            value = state[ref].value
            to = rng.choice(self.rollup_users)
            amount = rng.randint(1, value)
            outs = [Output(pay_to(to.address), amount)]
            if value > amount:
                outs.append(Output(pay_to(user.address), value - amount))
            tx = Transaction((TxInput(ref),), tuple(outs), sender=user.address).signed(user)
            state = apply_tx(state, tx)
            batch.append(tx)
        claimed = state_root(state)
        fraudulent = self.operator.behavior == "ByzFraudulentBatcher" and rng.random() < 0.5
        if fraudulent:
            claimed = bytes([claimed[0] ^ 0x80]) + claimed[1:]
        c = rollup_commit(self.rollup, batch, self.rollup.head, claimed, self.slot)
        self._em().rollup_batches += 1
        self._log({
            "type": "rollup_commit", **c.to_json(), "transactions": [t.to_json() for t in batch],
        })

    def _rollup_state(self) -> UtxoSet:
        """Honest execution of every live batch; rolled-back transactions are gone."""
        state = self.rollup_genesis
        for c in self.rollup.commitments:
            if c.status is not BatchStatus.ROLLED_BACK:
                state, _ = replay_state(c.transactions, state)
        return state

    def _challenge(self) -> None:
        """The honest watcher replays live batches and sends a proof for the first bad one."""
        if self.rollup is None:
            return
        proof = challenge_all(self.rollup, self.rollup_genesis)
        if proof is None or proof.batch_index in self.challenged:
            return
        self.challenged.add(proof.batch_index)
        self.sched.send("watcher", ROLLUP, ("fraud", proof))

    def _finalize_rollup(self) -> None:
        if self.rollup is None:
            return
        done = rollup_finalize(self.rollup, self.slot)
        if done:
            self._log({"type": "rollup_finalized", "batches": done})

    # --- driver ---------------------------------------------------------------

    def _run_slot(self, emit: bool) -> None:
        self.sched.now = self.slot
        if emit:
            self._emit()
        self.sched.run_until(self.slot)
        self._produce()
        self._challenge()
        self._sweep()
        self._finalize_rollup()

    def _quiet(self) -> bool:
        if self.sched.pending():
            return False
        if any(rt.mempool or rt.ledger.locks or rt.ledger.open for rt in self.shards):
            return False
        return True

    def run(self) -> SimResult:
        cfg = self.cfg
        try:
            for e in range(cfg.epochs):
                self._begin_epoch()
                for i in range(cfg.epoch_length):
                    self.slot = e * cfg.epoch_length + i
                    self._run_slot(emit=True)
                if e < cfg.epochs - 1:
                    self._end_epoch()
            if cfg.epochs:
                # drain: no new work, let sessions and mempools settle under the last roster
                self.draining = True
                limit = self.slot + cfg.lock_period + 4 * cfg.latency.max + cfg.validation_period + 2
                while not self._quiet() and self.slot < limit:
                    self.slot += 1
                    self._run_slot(emit=False)
                self._end_epoch()
        finally:
            if self.pool is not None:
                self.pool.shutdown()
        residual = {
            str(s): sorted(r.to_json() for r in rt.ledger.locks) for s, rt in enumerate(self.shards) if rt.ledger.locks
        }
        self._log({
            "type": "final",
            "utxo_digest": {str(s): state_root(rt.ledger.utxo).hex() for s, rt in enumerate(self.shards)},
            "locks": residual,
            "open_sessions": {str(s): len(rt.ledger.open) for s, rt in enumerate(self.shards)},
        })
        totals = {
            "committed": sum(sum(e.committed) for e in self.metrics),
            "drain_committed": sum(sum(e.drain_committed) for e in self.metrics),
            "emitted": dict(sorted(self.gen.emitted.items())),
            "sessions": {
                "Committed": sum(e.sessions["Committed"] for e in self.metrics),
                "RolledBack": sum(e.sessions["RolledBack"] for e in self.metrics),
                "opened": len(self.sessions),
            },
            "invalid_blocks_committed": sum(e.invalid_blocks_committed for e in self.metrics),
            "slots": self.slot + 1 if cfg.epochs else 0,
            "events_delivered": self.sched.delivered,
        }
        self.transcript.close()
        result = SimResult(cfg, self.metrics, totals, self.transcript)
        result.digest = result.compute_digest()
        return result


class _LedgerChain:
    """Adapter presenting a shard's UTXO set as a peg parent chain."""

    def __init__(self, name: bytes, ledger: ShardLedger):
        self.name = name
        self._ledger = ledger

    @property
    def utxo(self) -> UtxoSet:
        return self._ledger.utxo

    @utxo.setter
    def utxo(self, value: UtxoSet) -> None:
        self._ledger.utxo = value


def run_scenario(cfg: ScenarioConfig, transcript_path=None, keep_transcript: bool = True) -> SimResult:
    """Run ``cfg`` end to end.

    ``transcript_path`` streams the transcript to disk; ``keep_transcript=False``
    drops the in-memory copy for long runs (the digest is unaffected).
    """
    return Simulation(cfg, transcript_path, keep_transcript).run()
