"""Shared builders for chain-level tests."""
from eutxoshard.chain import GENESIS_HASH, apply_block, build_block, vote_on
from eutxoshard.crypto import hash256
from eutxoshard.ledger import Output, Transaction, TxInput, UtxoSet, pay_to

from conftest import key

PEOPLE = [key(n) for n in range(6)]


def pay(kp, value):
    return Output(pay_to(kp.address), value)


def honest_chain(length=10, txs_per_block=2, members=PEOPLE[:4]):
    """A valid chain of payments, with member votes on each block."""
    utxo = UtxoSet.genesis([pay(p, 1000) for p in PEOPLE])
    genesis = utxo
    blocks = []
    prev = GENESIS_HASH
    for slot in range(length):
        txs = []
        taken = set()
        for n in range(txs_per_block):
            owner = PEOPLE[(slot + n) % len(PEOPLE)]
            ref = next((r for r, o in sorted(utxo.items()) if o.owner == owner.address and r not in taken), None)
            if ref is None:
                continue
            taken.add(ref)
            value = utxo[ref].value
            to = PEOPLE[(slot + n + 1) % len(PEOPLE)]
            tx = Transaction(
                (TxInput(ref),), (pay(to, value // 2), pay(owner, value - value // 2 - 1)), fee=1,
                sender=owner.address,
            ).signed(owner)
            txs.append(tx)
        block = build_block(txs, prev, slot, members[slot % len(members)].address)
        block = block.with_votes(vote_on(block, m) for m in members)
        utxo = apply_block(utxo, block)
        blocks.append(block)
        prev = block.hash
    return genesis, blocks, utxo


def peg_workout(peg, users, rng, ops, on_step=None, start_slot=0):
    """Drive ``peg`` through ``ops`` random lock/mint/transfer/burn/unlock steps.

    Only steps that are possible in the current state are drawn. Returns the
    number of early-unlock attempts made, all of which must have failed.
    """
    from eutxoshard.layer2 import PegError, peg_burn, peg_lock, peg_mint, peg_unlock
    from eutxoshard.ledger import apply_tx

    slot = start_slot
    early = 0
    for _ in range(ops):
        slot += 1
        kind = rng.choice(["lock", "mint", "transfer", "burn", "unlock", "unlock"])
        if kind == "lock":
            user = rng.choice(users)
            mine = [r for r, o in sorted(peg.parent.utxo.items()) if o.owner == user.address and o.value > 0]
            if mine:
                ref = rng.choice(mine)
                peg_lock(peg, ref, user, rng.randint(1, peg.parent.utxo[ref].value), slot)
        elif kind == "mint" and peg.pending_auths:
            peg_mint(peg, peg.pending_auths[rng.choice(sorted(peg.pending_auths))])
        elif kind == "transfer":
            user = rng.choice(users)
            mine = [r for r, o in sorted(peg.child.utxo.items()) if o.owner == user.address]
            if mine:
                ref = rng.choice(mine)
                value = peg.child.utxo[ref].value
                split = rng.randint(0, value)
                to = rng.choice(users)
                tx = Transaction((TxInput(ref),), (pay(to, split), pay(user, value - split)), sender=user.address).signed(user)
                peg.child.utxo = apply_tx(peg.child.utxo, tx, slot)
        elif kind == "burn":
            user = rng.choice(users)
            mine = [r for r, o in sorted(peg.child.utxo.items()) if o.owner == user.address and o.value > 0]
            if mine:
                peg_burn(peg, rng.sample(mine, rng.randint(1, min(3, len(mine)))), user, slot)
        elif kind == "unlock" and peg.pending_burns:
            proof = peg.pending_burns[rng.choice(sorted(peg.pending_burns))]
            if slot < proof.burn_slot + peg.validation_period:
                early += 1
                try:
                    peg_unlock(peg, proof, slot)
                except PegError as exc:
                    assert exc.kind == "PeriodNotElapsed"
                else:
                    raise AssertionError("early unlock succeeded")
            else:
                peg_unlock(peg, proof, slot)
        if on_step is not None:
            on_step(peg, kind)
    return early


def double_spend_events():
    """A hand-built transcript: one shard, two quorum-signed blocks spending the same coin."""
    from eutxoshard.sharding import establish_identity, form_epoch, vrf_ticket
    from eutxoshard.simnet.engine import epoch_record

    members = PEOPLE[:4]
    randomness = hash256(b"fixture-epoch")
    identities = [establish_identity(randomness, bytes([10, 0, 0, n]), m, 0) for n, m in enumerate(members)]
    tickets = [vrf_ticket(m, randomness) for m in members]
    ctx = form_epoch(0, randomness, identities, tickets, 1, 0, min_shard_size=4)
    alice, bob, carol = PEOPLE[4], PEOPLE[5], PEOPLE[0]
    utxo = UtxoSet.genesis([pay(alice, 50)], tag=b"fixture")
    coin = next(iter(utxo))
    events = [
        {"type": "genesis", "shard": 0, "utxo": utxo.to_json()},
        {**epoch_record(ctx, identities, tickets, 0, 4), "slot": 0, "epoch": 0},
    ]
    prev = GENESIS_HASH
    for slot, to in ((1, bob), (2, carol)):
        tx = Transaction((TxInput(coin),), (pay(to, 50),), sender=alice.address).signed(alice)
        block = build_block([tx], prev, slot, members[0].address)
        block = block.with_votes(vote_on(block, m) for m in members)
        events.append({"type": "block", "shard": 0, "height": slot - 1, "block": block.to_json(), "slot": slot, "epoch": 0})
        prev = block.hash
    return events
