"""Validator scripts: a small total constraint language.

A script is an immutable expression tree. Evaluation is deterministic and
bounded: every visited node costs one step, and depth is capped, so a script
either returns a boolean or raises ``ScriptError``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import TYPE_CHECKING, Iterable, Union

from ..constants import MAX_DATUM_BYTES, MAX_SCRIPT_DEPTH, SCRIPT_STEP_BUDGET, TERMINAL_DATUM
from ..crypto import Digest, hash256
from ..encoding import DecodeError, Reader, Writer

if TYPE_CHECKING:
    from .tx import Output, Transaction


class ScriptError(Exception):
    def __init__(self, reason: str) -> None:
        super().__init__(reason)
        self.reason = reason


class _Node:
    tag: int

    def encode(self, w: Writer) -> None:
        w.u8(self.tag)

    @cached_property
    def script_bytes(self) -> bytes:
        w = Writer()
        self.encode(w)
        return w.getvalue()

    @cached_property
    def hash(self) -> Digest:
        return hash256(self.script_bytes)

    def depth(self) -> int:
        return 1


@dataclass(frozen=True, eq=True)
class Always(_Node):
    tag = 0


@dataclass(frozen=True, eq=True)
class Never(_Node):
    tag = 1


@dataclass(frozen=True, eq=True)
class SignedBy(_Node):
    address: Digest
    tag = 2

    def encode(self, w: Writer) -> None:
        w.u8(self.tag).digest(self.address)


@dataclass(frozen=True, eq=True)
class After(_Node):
    """Holds from ``slot`` onwards (inclusive)."""

    slot: int
    tag = 3

    def encode(self, w: Writer) -> None:
        w.u8(self.tag).u64(self.slot)


@dataclass(frozen=True, eq=True)
class Before(_Node):
    """Holds strictly before ``slot``."""

    slot: int
    tag = 4

    def encode(self, w: Writer) -> None:
        w.u8(self.tag).u64(self.slot)


@dataclass(frozen=True, eq=True)
class DatumEquals(_Node):
    datum: bytes
    tag = 5

    def encode(self, w: Writer) -> None:
        w.u8(self.tag).blob(self.datum)


@dataclass(frozen=True, eq=True)
class NextDatumEquals(_Node):
    datum: bytes
    tag = 6

    def encode(self, w: Writer) -> None:
        w.u8(self.tag).blob(self.datum)


@dataclass(frozen=True, eq=True)
class ValuePreserved(_Node):
    tag = 7


@dataclass(frozen=True, eq=True)
class ContinuesContract(_Node):
    tag = 8


@dataclass(frozen=True, eq=True)
class And(_Node):
    children: tuple["Script", ...]
    tag = 9

    def encode(self, w: Writer) -> None:
        w.u8(self.tag).u32(len(self.children))
        for c in self.children:
            c.encode(w)

    def depth(self) -> int:
        return 1 + max((c.depth() for c in self.children), default=0)


@dataclass(frozen=True, eq=True)
class Or(_Node):
    children: tuple["Script", ...]
    tag = 10

    def encode(self, w: Writer) -> None:
        w.u8(self.tag).u32(len(self.children))
        for c in self.children:
            c.encode(w)

    def depth(self) -> int:
        return 1 + max((c.depth() for c in self.children), default=0)


@dataclass(frozen=True, eq=True)
class Not(_Node):
    child: "Script"
    tag = 11

    def encode(self, w: Writer) -> None:
        w.u8(self.tag)
        self.child.encode(w)

    def depth(self) -> int:
        return 1 + self.child.depth()


Script = Union[
    Always, Never, SignedBy, After, Before, DatumEquals, NextDatumEquals,
    ValuePreserved, ContinuesContract, And, Or, Not,
]


def pay_to(address: Digest) -> SignedBy:
    return SignedBy(address)


def is_pay_to_address(script: Script) -> bool:
    return isinstance(script, SignedBy)


def state_machine(transitions: Iterable[tuple[bytes, bytes]]) -> Or:
    """Validator accepting exactly the listed (current datum -> next datum) steps.

    Spending a terminal-datum output is always allowed so the machine can be
    wound down.
    """
    steps = tuple(
        And((DatumEquals(cur), NextDatumEquals(nxt), ValuePreserved()))
        for cur, nxt in transitions
    )
    return Or(steps + (DatumEquals(TERMINAL_DATUM),))


# --------------------------------------------------------------- decoding


def decode_script(data: bytes) -> Script:
    r = Reader(data)
    script = _read(r, 1)
    r.finish()
    return script


def read_script(r: Reader) -> Script:
    return _read(r, 1)


def _read(r: Reader, depth: int) -> Script:
    if depth > MAX_SCRIPT_DEPTH:
        raise DecodeError("script nesting exceeds depth limit")
    tag = r.u8()
    if tag == 0:
        return Always()
    if tag == 1:
        return Never()
    if tag == 2:
        return SignedBy(r.digest())
    if tag == 3:
        return After(r.u64())
    if tag == 4:
        return Before(r.u64())
    if tag == 5:
        return DatumEquals(r.blob(limit=MAX_DATUM_BYTES))
    if tag == 6:
        return NextDatumEquals(r.blob(limit=MAX_DATUM_BYTES))
    if tag == 7:
        return ValuePreserved()
    if tag == 8:
        return ContinuesContract()
    if tag in (9, 10):
        n = r.u32()
        if n > SCRIPT_STEP_BUDGET:
            raise DecodeError("too many script children")
        children = tuple(_read(r, depth + 1) for _ in range(n))
        return And(children) if tag == 9 else Or(children)
    if tag == 11:
        return Not(_read(r, depth + 1))
    raise DecodeError(f"unknown script tag {tag}")


# ------------------------------------------------------------ json debug


_SIMPLE = {0: "true", 1: "false", 7: "value_preserved", 8: "continues"}


def script_to_json(s: Script):
    if s.tag in _SIMPLE:
        return _SIMPLE[s.tag]
    if isinstance(s, SignedBy):
        return ["signed_by", s.address.hex()]
    if isinstance(s, After):
        return ["after", s.slot]
    if isinstance(s, Before):
        return ["before", s.slot]
    if isinstance(s, DatumEquals):
        return ["datum_eq", s.datum.hex()]
    if isinstance(s, NextDatumEquals):
        return ["next_datum_eq", s.datum.hex()]
    if isinstance(s, And):
        return ["and", [script_to_json(c) for c in s.children]]
    if isinstance(s, Or):
        return ["or", [script_to_json(c) for c in s.children]]
    if isinstance(s, Not):
        return ["not", script_to_json(s.child)]
    raise TypeError(f"not a script: {s!r}")


def script_from_json(obj) -> Script:
    if isinstance(obj, str):
        by_name = {v: k for k, v in _SIMPLE.items()}
        return {0: Always, 1: Never, 7: ValuePreserved, 8: ContinuesContract}[by_name[obj]]()
    op, arg = obj
    if op == "signed_by":
        return SignedBy(bytes.fromhex(arg))
    if op == "after":
        return After(arg)
    if op == "before":
        return Before(arg)
    if op == "datum_eq":
        return DatumEquals(bytes.fromhex(arg))
    if op == "next_datum_eq":
        return NextDatumEquals(bytes.fromhex(arg))
    if op == "and":
        return And(tuple(script_from_json(c) for c in arg))
    if op == "or":
        return Or(tuple(script_from_json(c) for c in arg))
    if op == "not":
        return Not(script_from_json(arg))
    raise ValueError(f"unknown script op {op!r}")


# ------------------------------------------------------------ evaluation


@dataclass(frozen=True)
class ScriptContext:
    spending_tx: "Transaction"
    input_index: int
    current_slot: int
    spent_output: "Output"
    continuing_output: "Output | None"
    signers: frozenset[Digest]


class _Budget:
    __slots__ = ("left",)

    def __init__(self, steps: int) -> None:
        self.left = steps

    def charge(self) -> None:
        self.left -= 1
        if self.left < 0:
            raise ScriptError("BudgetExhausted")


def eval_script(script: Script, ctx: ScriptContext, budget: int = SCRIPT_STEP_BUDGET) -> bool:
    """Evaluate ``script`` under ``ctx``.

    Raises ``ScriptError("BudgetExhausted")`` past ``budget`` steps and
    ``ScriptError("DepthExceeded")`` for trees deeper than the limit.
    """
    return _eval(script, ctx, _Budget(budget), 1)


def _eval(s: Script, ctx: ScriptContext, budget: _Budget, depth: int) -> bool:
    budget.charge()
    if depth > MAX_SCRIPT_DEPTH:
        raise ScriptError("DepthExceeded")
    tag = s.tag
    if tag == 0:
        return True
    if tag == 1:
        return False
    if tag == 2:
        return s.address in ctx.signers
    if tag == 3:
        return ctx.current_slot >= s.slot
    if tag == 4:
        return ctx.current_slot < s.slot
    if tag == 5:
        return ctx.spent_output.datum == s.datum
    if tag == 6:
        nxt = ctx.continuing_output
        return nxt is not None and nxt.datum == s.datum
    if tag == 7:
        nxt = ctx.continuing_output
        return nxt is not None and nxt.value == ctx.spent_output.value
    if tag == 8:
        return ctx.continuing_output is not None or ctx.spent_output.datum == TERMINAL_DATUM
    if tag == 9:
        # evaluate every child so cost does not depend on short-circuiting
        results = [_eval(c, ctx, budget, depth + 1) for c in s.children]
        return all(results)
    if tag == 10:
        results = [_eval(c, ctx, budget, depth + 1) for c in s.children]
        return any(results)
    if tag == 11:
        return not _eval(s.child, ctx, budget, depth + 1)
    raise ScriptError(f"UnknownNode:{tag}")
