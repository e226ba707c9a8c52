"""Ledger records: outputs, references, transactions and the UTXO set."""
from __future__ import annotations

from dataclasses import dataclass, replace
from functools import cached_property
from typing import Iterable, Iterator, Mapping

from ..constants import MAX_DATUM_BYTES, MAX_SCRIPT_DEPTH, MAX_SLOT, TERMINAL_DATUM
from ..crypto import Digest, Signature, hash256
from ..encoding import Reader, Writer
from .script import Script, is_pay_to_address, read_script, script_from_json, script_to_json


@dataclass(frozen=True, order=True)
class OutputRef:
    tx_id: Digest
    index: int

    def encode(self, w: Writer) -> None:
        w.digest(self.tx_id).u32(self.index)

    @cached_property
    def key(self) -> bytes:
        return self.tx_id + self.index.to_bytes(4, "big")

    @classmethod
    def decode(cls, r: Reader) -> "OutputRef":
        return cls(r.digest(), r.u32())

    def __str__(self) -> str:
        return f"{self.tx_id.hex()[:16]}:{self.index}"

    def to_json(self) -> str:
        return f"{self.tx_id.hex()}:{self.index}"

    @classmethod
    def from_json(cls, s: str) -> "OutputRef":
        tx, idx = s.split(":")
        return cls(bytes.fromhex(tx), int(idx))


@dataclass(frozen=True)
class Output:
    validator: Script
    value: int
    datum: bytes = b""

    def __post_init__(self) -> None:
        if self.value < 0:
            raise ValueError("output value must be non-negative")

    @property
    def validator_hash(self) -> Digest:
        return self.validator.hash

    @property
    def is_contract(self) -> bool:
        return bool(self.datum)

    @property
    def is_terminal(self) -> bool:
        return self.datum == TERMINAL_DATUM

    @property
    def owner(self) -> Digest | None:
        """Address for pay-to-address outputs, ``None`` for contracts."""
        if not self.datum and is_pay_to_address(self.validator):
            return self.validator.address
        return None

    def well_formed(self) -> str | None:
        if len(self.datum) > MAX_DATUM_BYTES:
            return "datum too large"
        try:
            depth = self.validator.depth()
        except RecursionError:
            return "script too deep"
        if depth > MAX_SCRIPT_DEPTH:
            return "script too deep"
        if self.value >= 2**64:
            return "value out of range"
        return None

    def encode(self, w: Writer) -> None:
        self.validator.encode(w)
        w.u64(self.value).blob(self.datum)

    @classmethod
    def decode(cls, r: Reader) -> "Output":
        validator = read_script(r)
        return cls(validator, r.u64(), r.blob(limit=MAX_DATUM_BYTES))

    @cached_property
    def encoded(self) -> bytes:
        w = Writer()
        self.encode(w)
        return w.getvalue()

    def to_json(self) -> dict:
        return {
            "validator": script_to_json(self.validator),
            "value": self.value,
            "datum": self.datum.hex(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Output":
        return cls(script_from_json(obj["validator"]), obj["value"], bytes.fromhex(obj["datum"]))


@dataclass(frozen=True)
class TxInput:
    ref: OutputRef
    redeemer: bytes = b""
    signature: Signature | None = None


@dataclass(frozen=True)
class Transaction:
    inputs: tuple[TxInput, ...]
    outputs: tuple[Output, ...]
    fee: int = 0
    valid_from: int = 0
    valid_to: int = MAX_SLOT
    sender: Digest = b"\x00" * 32

    def body_bytes(self) -> bytes:
        """Canonical bytes of everything except signatures."""
        w = Writer().u32(len(self.inputs))
        for i in self.inputs:
            i.ref.encode(w)
            w.blob(i.redeemer)
        w.u32(len(self.outputs))
        for o in self.outputs:
            o.encode(w)
        w.u64(self.fee).u64(self.valid_from).u64(self.valid_to).digest(self.sender)
        return w.getvalue()

    @cached_property
    def id(self) -> Digest:
        return hash256(self.body_bytes())

    def encode(self, w: Writer) -> None:
        """Full wire form: body followed by one optional signature per input."""
        w.raw(self.body_bytes())
        for i in self.inputs:
            if i.signature is None:
                w.u8(0)
            else:
                w.u8(1)
                i.signature.encode(w)

    def to_bytes(self) -> bytes:
        w = Writer()
        self.encode(w)
        return w.getvalue()

    @classmethod
    def decode(cls, r: Reader) -> "Transaction":
        n_in = r.u32()
        if n_in > 1 << 16:
            raise ValueError("too many inputs")
        refs = [(OutputRef.decode(r), r.blob(limit=MAX_DATUM_BYTES)) for _ in range(n_in)]
        n_out = r.u32()
        if n_out > 1 << 16:
            raise ValueError("too many outputs")
        outputs = tuple(Output.decode(r) for _ in range(n_out))
        fee, valid_from, valid_to, sender = r.u64(), r.u64(), r.u64(), r.digest()
        inputs = []
        for ref, redeemer in refs:
            sig = Signature.decode(r) if r.flag() else None
            inputs.append(TxInput(ref, redeemer, sig))
        return cls(tuple(inputs), outputs, fee, valid_from, valid_to, sender)

    @property
    def refs(self) -> tuple[OutputRef, ...]:
        return tuple(i.ref for i in self.inputs)

    def out_refs(self) -> Iterator[tuple[OutputRef, Output]]:
        tid = self.id
        for n, o in enumerate(self.outputs):
            yield OutputRef(tid, n), o

    def signed(self, *keys) -> "Transaction":
        """Attach a signature over the tx id to every input, cycling through ``keys``.

        Inputs are matched to keys by position when several keys are given;
        a single key signs all inputs.
        """
        tid = self.id
        sigs = [k.sign(tid) for k in keys]
        inputs = tuple(
            replace(inp, signature=sigs[n % len(sigs)]) for n, inp in enumerate(self.inputs)
        )
        return replace(self, inputs=inputs)

    def unsigned(self) -> "Transaction":
        return replace(self, inputs=tuple(replace(i, signature=None) for i in self.inputs))

    def to_json(self) -> dict:
        return {
            "id": self.id.hex(),
            "inputs": [
                {
                    "ref": i.ref.to_json(),
                    "redeemer": i.redeemer.hex(),
                    "signature": i.signature.to_json() if i.signature else None,
                }
                for i in self.inputs
            ],
            "outputs": [o.to_json() for o in self.outputs],
            "fee": self.fee,
            "valid_from": self.valid_from,
            "valid_to": self.valid_to,
            "sender": self.sender.hex(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Transaction":
        inputs = tuple(
            TxInput(
                OutputRef.from_json(i["ref"]),
                bytes.fromhex(i["redeemer"]),
                Signature.from_json(i["signature"]) if i["signature"] else None,
            )
            for i in obj["inputs"]
        )
        return cls(
            inputs,
            tuple(Output.from_json(o) for o in obj["outputs"]),
            obj["fee"],
            obj["valid_from"],
            obj["valid_to"],
            bytes.fromhex(obj["sender"]),
        )


def tx_id(tx: Transaction) -> Digest:
    return tx.id


class UtxoSet(Mapping[OutputRef, Output]):
    """Immutable map of unspent outputs. Updates return a new set."""

    __slots__ = ("_entries",)

    def __init__(self, entries: Mapping[OutputRef, Output] | Iterable[tuple[OutputRef, Output]] = ()):
        self._entries: dict[OutputRef, Output] = dict(entries)

    def __getitem__(self, ref: OutputRef) -> Output:
        return self._entries[ref]

    def get(self, ref, default=None):
        return self._entries.get(ref, default)

    def __contains__(self, ref) -> bool:
        return ref in self._entries

    def __iter__(self) -> Iterator[OutputRef]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def items(self):
        return self._entries.items()

    def __eq__(self, other) -> bool:
        if isinstance(other, UtxoSet):
            return self._entries == other._entries
        return NotImplemented

    __hash__ = None  # type: ignore[assignment]

    def __repr__(self) -> str:
        return f"UtxoSet({len(self._entries)} entries, value={self.total_value()})"

    def total_value(self) -> int:
        return sum(o.value for o in self._entries.values())

    def updated(self, removed: Iterable[OutputRef] = (), added: Iterable[tuple[OutputRef, Output]] = ()) -> "UtxoSet":
        entries = dict(self._entries)
        for ref in removed:
            del entries[ref]
        entries.update(added)
        return UtxoSet(entries)

    @classmethod
    def genesis(cls, outputs: Iterable[Output], tag: bytes = b"genesis") -> "UtxoSet":
        """Seed a set whose refs hang off a synthetic genesis transaction id."""
        tid = hash256(tag)
        return cls((OutputRef(tid, n), o) for n, o in enumerate(outputs))

    def to_json(self) -> dict:
        return {r.to_json(): o.to_json() for r, o in sorted(self._entries.items())}

    @classmethod
    def from_json(cls, obj: dict) -> "UtxoSet":
        return cls((OutputRef.from_json(k), Output.from_json(v)) for k, v in obj.items())
