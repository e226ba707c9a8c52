"""Client-side workload generation.

The generator only emits transactions that are spendable at emission time
according to its own view: a coin leaves the view when a transaction spends
it and comes back (as new outputs) only once a commit is observed. Rejections
seen by the protocol are therefore protocol effects, not workload noise.
"""
from __future__ import annotations

import random
from dataclasses import dataclass, field

from ..crypto import Digest, KeyPair
from ..ledger import Output, OutputRef, Transaction, TxInput, counter_datum, pay_to
from ..sharding import home_shard_of_address

COIN_VALUE = 1000


@dataclass
class Contract:
    validator: object
    shard: int
    limit: int
    ref: OutputRef | None = None
    output: Output | None = None
    step: int = 0
    busy: bool = False


@dataclass
class Wallet:
    key: KeyPair
    home: int
    # shard -> refs owned and believed spendable, in arrival order
    coins: dict[int, list[OutputRef]] = field(default_factory=dict)


class WorkloadGenerator:
    def __init__(self, rng: random.Random, clients: list[KeyPair], shard_count: int, unpaid: frozenset[int] = frozenset()):
        self.rng = rng
        # clients never chosen as payees; vanishing clients would otherwise soak up the supply
        self.unpaid = unpaid
        self.shard_count = shard_count
        self.wallets = [Wallet(k, home_shard_of_address(k.address, shard_count)) for k in clients]
        self.by_address = {w.key.address: i for i, w in enumerate(self.wallets)}
        self.values: dict[OutputRef, int] = {}
        self.contracts: list[Contract] = []
        self.emitted = {"intra": 0, "cross": 0, "contract": 0}
        self._returns: dict[int, list[tuple[int, OutputRef, int]]] = {}

    # --- view maintenance -------------------------------------------------

    def add_coin(self, ref: OutputRef, out: Output, shard: int) -> None:
        owner = out.owner
        idx = self.by_address.get(owner) if owner is not None else None
        if idx is None or out.value == 0:
            return
        self.values[ref] = out.value
        self.wallets[idx].coins.setdefault(shard, []).append(ref)

    def observe_commit(self, tx: Transaction, shard: int) -> None:
        """Outputs of ``tx`` now exist on ``shard``."""
        for ref, out in tx.out_refs():
            self.add_coin(ref, out, shard)
        for c in self.contracts:
            if c.busy and any(r == c.ref for r in tx.refs):
                self._advance(c, tx)

    def return_later(self, slot: int, tx: Transaction, located: dict[OutputRef, int]) -> None:
        """Give the inputs of an aborted ``tx`` back to their owners at ``slot``."""
        for r in tx.refs:
            idx = self._owner_of_input(tx, r)
            if idx is not None:
                self._returns.setdefault(slot, []).append((idx, r, located[r]))

    def release_returns(self, slot: int) -> None:
        for idx, ref, shard in self._returns.pop(slot, []):
            self.wallets[idx].coins.setdefault(shard, []).append(ref)

    def _owner_of_input(self, tx: Transaction, ref: OutputRef) -> int | None:
        return self.by_address.get(tx.sender) if ref in self.values else None

    def _take(self, wallet: Wallet, shard: int) -> OutputRef | None:
        coins = wallet.coins.get(shard)
        if not coins:
            return None
        return coins.pop(self.rng.randrange(len(coins)))

    # --- emission ---------------------------------------------------------

    def _payment(self, wallet: Wallet, refs: list[OutputRef], recipient: Digest) -> Transaction:
        total = sum(self.values[r] for r in refs)
        amount = self.rng.randint(1, total) if total > 1 else total
        outs = [Output(pay_to(recipient), amount)]
        if total > amount:
            outs.append(Output(pay_to(wallet.key.address), total - amount))
        tx = Transaction(tuple(TxInput(r) for r in refs), tuple(outs), sender=wallet.key.address)
        return tx.signed(wallet.key)

    def intra(self, shard: int) -> Transaction | None:
        """A payment between two clients homed on ``shard``, spending a coin held there."""
        local = [w for w in self.wallets if w.home == shard and w.coins.get(shard)]
        if not local:
            return None
        w = self.rng.choice(local)
        ref = self._take(w, shard)
        peers = [v for i, v in enumerate(self.wallets) if v.home == shard and i not in self.unpaid] or [w]
        tx = self._payment(w, [ref], self.rng.choice(peers).key.address)
        self.emitted["intra"] += 1
        return tx

    def cross(self) -> tuple[Transaction, dict[OutputRef, int]] | None:
        """A payment spending at least one coin held away from the sender's home shard."""
        candidates = [w for w in self.wallets if any(c for s, c in w.coins.items() if s != w.home)]
        if not candidates:
            return None
        w = self.rng.choice(candidates)
        foreign = sorted(s for s, c in w.coins.items() if s != w.home and c)
        shard = self.rng.choice(foreign)
        refs = [self._take(w, shard)]
        located = {refs[0]: shard}
        if w.coins.get(w.home) and self.rng.random() < 0.5:
            extra = self._take(w, w.home)
            refs.append(extra)
            located[extra] = w.home
        # paying a client homed elsewhere keeps the supply of foreign coins steady
        payees = [v for i, v in enumerate(self.wallets) if i not in self.unpaid and v.home != w.home] or [w]
        recipient = self.rng.choice(payees).key.address
        tx = self._payment(w, refs, recipient)
        self.emitted["cross"] += 1
        return tx, located

    # --- contracts --------------------------------------------------------

    def add_contract(self, validator, shard: int, limit: int, ref: OutputRef, out: Output) -> None:
        self.contracts.append(Contract(validator, shard, limit, ref, out))

    def contract_step(self) -> tuple[Contract, Transaction] | None:
        idle = [c for c in self.contracts if not c.busy and c.ref is not None]
        if not idle:
            return None
        c = self.rng.choice(idle)
        if c.step < c.limit:
            nxt = (Output(c.validator, c.output.value, counter_datum(c.step + 1)),)
        else:
            # the last transition parks the contract in its terminal state
            nxt = (Output(c.validator, c.output.value, b"\xff"),)
        tx = Transaction((TxInput(c.ref),), nxt, sender=self.wallets[0].key.address)
        c.busy = True
        self.emitted["contract"] += 1
        return c, tx

    def _advance(self, c: Contract, tx: Transaction) -> None:
        c.busy = False
        out = tx.outputs[0]
        if out.is_terminal:
            c.ref = None
            return
        c.ref = OutputRef(tx.id, 0)
        c.output = out
        c.step += 1

    def contract_dropped(self, tx: Transaction) -> None:
        for c in self.contracts:
            if c.busy and c.ref in tx.refs:
                c.busy = False
