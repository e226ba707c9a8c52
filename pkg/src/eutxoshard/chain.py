"""Blocks, hash-chained headers and per-shard quorum voting."""
from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import Iterable, Mapping, Sequence

from .constants import quorum_size
from .crypto import Digest, KeyPair, Signature, address_of, hash256, merkle_root, verify_sig
from .encoding import Reader, Writer
from .ledger import (
    Output, OutputRef, Transaction, UtxoSet, ValidationReport, Violation,
    apply_txs, check_structure, valid_signers, validate_tx,
)

GENESIS_HASH = hash256(b"genesis-block")


class BlockKind(str, enum.Enum):
    BAD_PREV_HASH = "BadPrevHash"
    BAD_TX_ROOT = "BadTxRoot"
    BAD_BLOCK_HASH = "BadBlockHash"
    INVALID_TX = "InvalidTx"
    INTRA_BLOCK_CONFLICT = "IntraBlockConflict"
    BAD_TX_SIGNATURE = "BadTxSignature"
    BAD_VOTE = "BadVote"


class BlockError(ValueError):
    def __init__(self, message: str, refs: Sequence[OutputRef] = ()) -> None:
        super().__init__(message)
        self.refs = tuple(refs)


@dataclass(frozen=True)
class BlockHeader:
    timestamp: int
    nonce: int
    tx_root: Digest
    prev_hash: Digest
    producer: Digest
    block_hash: Digest

    def hashed_fields(self) -> bytes:
        w = Writer().u64(self.timestamp).u64(self.nonce)
        w.digest(self.tx_root).digest(self.prev_hash).digest(self.producer)
        return w.getvalue()

    def compute_hash(self) -> Digest:
        return hash256(self.hashed_fields())

    def encode(self, w: Writer) -> None:
        w.raw(self.hashed_fields()).digest(self.block_hash)

    @classmethod
    def decode(cls, r: Reader) -> "BlockHeader":
        return cls(r.u64(), r.u64(), r.digest(), r.digest(), r.digest(), r.digest())

    def to_json(self) -> dict:
        return {
            "timestamp": self.timestamp,
            "nonce": self.nonce,
            "tx_root": self.tx_root.hex(),
            "prev_hash": self.prev_hash.hex(),
            "producer": self.producer.hex(),
            "block_hash": self.block_hash.hex(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "BlockHeader":
        return cls(
            obj["timestamp"],
            obj["nonce"],
            bytes.fromhex(obj["tx_root"]),
            bytes.fromhex(obj["prev_hash"]),
            bytes.fromhex(obj["producer"]),
            bytes.fromhex(obj["block_hash"]),
        )


@dataclass(frozen=True)
class Vote:
    voter: Digest
    signature: Signature


@dataclass(frozen=True)
class Block:
    header: BlockHeader
    transactions: tuple[Transaction, ...]
    votes: tuple[Vote, ...] = ()

    @property
    def hash(self) -> Digest:
        return self.header.block_hash

    def with_votes(self, votes: Iterable[Vote]) -> "Block":
        return replace(self, votes=tuple(votes))

    def encode(self) -> bytes:
        w = Writer()
        self.header.encode(w)
        w.u32(len(self.transactions))
        for tx in self.transactions:
            tx.encode(w)
        w.u32(len(self.votes))
        for v in self.votes:
            w.digest(v.voter)
            v.signature.encode(w)
        return w.getvalue()

    @classmethod
    def decode(cls, data: bytes) -> "Block":
        r = Reader(data)
        header = BlockHeader.decode(r)
        n = r.u32()
        if n > 1 << 16:
            raise ValueError("too many transactions")
        txs = tuple(Transaction.decode(r) for _ in range(n))
        n = r.u32()
        if n > 1 << 16:
            raise ValueError("too many votes")
        votes = tuple(Vote(r.digest(), Signature.decode(r)) for _ in range(n))
        r.finish()
        return cls(header, txs, votes)

    def to_json(self) -> dict:
        return {
            "header": self.header.to_json(),
            "transactions": [t.to_json() for t in self.transactions],
            "votes": [{"voter": v.voter.hex(), **v.signature.to_json()} for v in self.votes],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Block":
        return cls(
            BlockHeader.from_json(obj["header"]),
            tuple(Transaction.from_json(t) for t in obj["transactions"]),
            tuple(Vote(bytes.fromhex(v["voter"]), Signature.from_json(v)) for v in obj["votes"]),
        )


def tx_root(txs: Sequence[Transaction]) -> Digest:
    return merkle_root([t.id for t in txs])


def find_conflicts(txs: Sequence[Transaction]) -> list[OutputRef]:
    seen: set[OutputRef] = set()
    clashes = []
    for tx in txs:
        for ref in dict.fromkeys(tx.refs):
            if ref in seen:
                clashes.append(ref)
            seen.add(ref)
    return clashes


def build_block(txs: Sequence[Transaction], prev_hash: Digest, slot: int, producer: Digest) -> Block:
    clashes = find_conflicts(txs)
    if clashes:
        raise BlockError(
            "conflicting transactions spend " + ", ".join(str(r) for r in clashes), clashes
        )
    root = tx_root(txs)
    header = BlockHeader(slot, 0, root, prev_hash, producer, b"\x00" * 32)
    header = replace(header, block_hash=header.compute_hash())
    return Block(header, tuple(txs))


def validate_block(utxo: Mapping[OutputRef, Output], block: Block, expected_prev_hash: Digest) -> ValidationReport:
    violations = []
    h = block.header
    if h.prev_hash != expected_prev_hash:
        violations.append(Violation(BlockKind.BAD_PREV_HASH))
    if tx_root(block.transactions) != h.tx_root:
        violations.append(Violation(BlockKind.BAD_TX_ROOT))
    if h.compute_hash() != h.block_hash:
        violations.append(Violation(BlockKind.BAD_BLOCK_HASH))
    clashes = find_conflicts(block.transactions)
    if clashes:
        violations.append(
            Violation(BlockKind.INTRA_BLOCK_CONFLICT, None, ", ".join(str(r) for r in clashes))
        )
    entries = dict(utxo.items())
    for n, tx in enumerate(block.transactions):
        report = validate_tx(entries, tx, h.timestamp)
        if not report.valid:
            violations.append(Violation(BlockKind.INVALID_TX, n, str(report)))
            continue
        for ref in tx.refs:
            del entries[ref]
        entries.update(tx.out_refs())
    return ValidationReport(tuple(violations))


def apply_block(utxo: UtxoSet, block: Block) -> UtxoSet:
    """Apply every transaction in order; on any failure the input set is returned untouched
    by way of the raised ``LedgerError``."""
    if find_conflicts(block.transactions):
        raise BlockError("block spends the same output twice")
    return apply_txs(utxo, block.transactions, block.header.timestamp)


@dataclass(frozen=True)
class QuorumResult:
    accepted: bool
    valid_votes: int
    required: int


def vote_on(block: Block, key: KeyPair) -> Vote:
    return Vote(key.address, key.sign(block.hash))


def collect_votes(block: Block, votes: Iterable[Vote], members: Iterable[Digest]) -> QuorumResult:
    """Count distinct member votes whose signature covers this block's hash."""
    members = set(members)
    counted: set[Digest] = set()
    for v in votes:
        if v.voter in counted or v.voter not in members:
            continue
        if address_of(v.signature.signer) != v.voter:
            continue
        if verify_sig(v.signature.signer, block.hash, v.signature):
            counted.add(v.voter)
    required = quorum_size(len(members))
    return QuorumResult(len(counted) >= required, len(counted), required)


@dataclass(frozen=True)
class ChainReport:
    first_invalid: int | None
    violations: tuple = ()

    @property
    def valid(self) -> bool:
        return self.first_invalid is None


def check_block_integrity(block: Block, expected_prev_hash: Digest) -> list[Violation]:
    """State-free checks: hash pointers, header hash, tx root, signatures present."""
    problems = []
    h = block.header
    if h.prev_hash != expected_prev_hash:
        problems.append(Violation(BlockKind.BAD_PREV_HASH))
    if h.compute_hash() != h.block_hash:
        problems.append(Violation(BlockKind.BAD_BLOCK_HASH))
    if tx_root(block.transactions) != h.tx_root:
        problems.append(Violation(BlockKind.BAD_TX_ROOT))
    for n, tx in enumerate(block.transactions):
        _, bad = valid_signers(tx)
        if bad or check_structure(tx, None):
            problems.append(Violation(BlockKind.BAD_TX_SIGNATURE, n))
    for n, v in enumerate(block.votes):
        if address_of(v.signature.signer) != v.voter or not verify_sig(
            v.signature.signer, h.block_hash, v.signature
        ):
            problems.append(Violation(BlockKind.BAD_VOTE, n))
    return problems


def validate_chain(genesis_hash: Digest, blocks: Sequence[Block]) -> ChainReport:
    """Walk the chain from ``genesis_hash``; report the first block that fails."""
    prev = genesis_hash
    for i, block in enumerate(blocks):
        problems = check_block_integrity(block, prev)
        if problems:
            return ChainReport(i, tuple(problems))
        prev = block.header.block_hash
    return ChainReport(None)
