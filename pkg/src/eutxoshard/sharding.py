"""Epoch formation: PoW identities, shard assignment, VRF election and routing.

Everything here is a pure function of published data, so any node can
recompute an epoch and audit the coordinator's announcement.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from .constants import DEFAULT_MIN_SHARD_SIZE, MAX_DIFFICULTY, MAX_POW_ATTEMPTS
from .crypto import Digest, KeyPair, VrfOutput, address_of, hash256, merkle_root, vrf_eval, vrf_verify
from .ledger import Output, Transaction


class ShardingError(ValueError):
    pass


@dataclass(frozen=True)
class NodeIdentity:
    public_key: bytes
    ip: bytes
    nonce: int
    pow_hash: Digest
    epoch: int = 0

    @property
    def address(self) -> Digest:
        return address_of(self.public_key)

    def to_json(self) -> dict:
        return {
            "public_key": self.public_key.hex(),
            "ip": ".".join(str(b) for b in self.ip),
            "nonce": self.nonce,
            "pow_hash": self.pow_hash.hex(),
            "epoch": self.epoch,
        }


def pow_hash(randomness: Digest, ip: bytes, public_key: bytes, nonce: int) -> Digest:
    return hash256(randomness + ip + public_key + struct.pack(">Q", nonce))


def leading_zero_bits(d: Digest) -> int:
    value = int.from_bytes(d, "big")
    return len(d) * 8 - value.bit_length()


def establish_identity(
    randomness: Digest, ip: bytes, keypair: KeyPair, difficulty: int, epoch: int = 0,
    max_attempts: int = MAX_POW_ATTEMPTS,
) -> NodeIdentity:
    """Search nonces 0, 1, 2, ... until the PoW hash has ``difficulty`` leading zero bits."""
    if not 0 <= difficulty <= MAX_DIFFICULTY:
        raise ShardingError(f"difficulty must be in [0, {MAX_DIFFICULTY}]")
    if len(ip) != 4:
        raise ShardingError("ip must be 4 bytes")
    prefix = randomness + ip + keypair.public
    for nonce in range(max_attempts):
        h = hash256(prefix + struct.pack(">Q", nonce))
        if leading_zero_bits(h) >= difficulty:
            return NodeIdentity(keypair.public, ip, nonce, h, epoch)
    raise ShardingError(f"no PoW solution within {max_attempts} attempts")


def verify_identity(identity: NodeIdentity, randomness: Digest, difficulty: int) -> bool:
    h = pow_hash(randomness, identity.ip, identity.public_key, identity.nonce)
    return h == identity.pow_hash and leading_zero_bits(h) >= difficulty


def _check_power_of_two(shard_count: int) -> int:
    if shard_count < 1 or shard_count & (shard_count - 1):
        raise ShardingError(f"shard count must be a power of two, got {shard_count}")
    return shard_count.bit_length() - 1


def trailing_bits(d: Digest, shard_count: int) -> int:
    """Integer value of the low log2(shard_count) bits of ``d``."""
    _check_power_of_two(shard_count)
    return int.from_bytes(d, "big") & (shard_count - 1)


def assign_shard(identity: NodeIdentity, shard_count: int, salt: int = 0, urs: Digest = b"") -> int:
    """Shard index from the trailing bits of the PoW hash.

    A non-zero ``salt`` (used only to re-draw undersized epochs) mixes the
    epoch's random string and the salt into the hash first.
    """
    if salt == 0:
        return trailing_bits(identity.pow_hash, shard_count)
    return trailing_bits(hash256(identity.pow_hash + urs + struct.pack(">I", salt)), shard_count)


def elect_coordinator(tickets: Iterable[tuple[bytes, VrfOutput]], randomness: Digest) -> Digest:
    """Address of the node with the smallest verified VRF value over ``randomness``."""
    best = None
    for public, out in tickets:
        if not vrf_verify(public, randomness, out):
            continue
        if best is None or out.value < best[0]:
            best = (out.value, address_of(public))
    if best is None:
        raise ShardingError("no verifiable VRF tickets")
    return best[1]


def compute_urs(vrf_values: Iterable[Digest]) -> Digest:
    values = sorted(vrf_values)
    if not values:
        raise ShardingError("cannot derive a random string from no VRF outputs")
    return hash256(b"".join(values))


def select_dss(urs: Digest, shard_count: int) -> int:
    if shard_count < 1:
        raise ShardingError("shard count must be positive")
    return trailing_bits(urs, shard_count)


def contract_keys(tx: Transaction, spent: Sequence[Output] = ()) -> list[Digest]:
    keys = {o.validator_hash for o in spent if o.is_contract}
    keys.update(o.validator_hash for o in tx.outputs if o.is_contract)
    return sorted(keys)


def route_tx(tx: Transaction, shard_count: int, spent: Sequence[Output] = ()) -> int:
    """Home shard of ``tx``.

    Transactions touching contract state (spent outputs in ``spent`` or
    created outputs with a datum) go to the shard of the smallest validator
    hash involved; everything else follows the sender address.
    """
    keys = contract_keys(tx, spent)
    if keys:
        return trailing_bits(keys[0], shard_count)
    return trailing_bits(tx.sender, shard_count)


def home_shard_of_address(address: Digest, shard_count: int) -> int:
    return trailing_bits(address, shard_count)


@dataclass(frozen=True)
class EpochContext:
    epoch_number: int
    randomness: Digest
    identities: tuple[NodeIdentity, ...]
    shard_count: int
    membership: Mapping[int, tuple[Digest, ...]]
    coordinator: Digest
    dss_index: int
    urs: Digest
    salt: int = 0

    def shard_of(self, address: Digest) -> int | None:
        for shard, members in self.membership.items():
            if address in members:
                return shard
        return None

    def digest(self) -> Digest:
        """Commitment to the roster, used to compare announcements."""
        parts = [self.randomness, self.urs, self.coordinator, struct.pack(">III", self.epoch_number, self.dss_index, self.salt)]
        for shard in range(self.shard_count):
            parts.extend(self.membership[shard])
            parts.append(b"|")
        return hash256(b"".join(parts))


def vrf_ticket(keypair: KeyPair, randomness: Digest) -> tuple[bytes, VrfOutput]:
    return keypair.public, vrf_eval(keypair.secret, randomness)


def form_epoch(
    epoch_number: int,
    randomness: Digest,
    identities: Sequence[NodeIdentity],
    tickets: Sequence[tuple[bytes, VrfOutput]],
    shard_count: int,
    difficulty: int,
    min_shard_size: int = DEFAULT_MIN_SHARD_SIZE,
    max_salt: int = 1024,
) -> EpochContext:
    """Verify published identities and VRFs and derive the whole epoch layout."""
    _check_power_of_two(shard_count)
    valid = [i for i in identities if verify_identity(i, randomness, difficulty)]
    valid.sort(key=lambda i: i.pow_hash)
    admitted = {i.public_key for i in valid}
    good_tickets = [
        (pk, out) for pk, out in tickets if pk in admitted and vrf_verify(pk, randomness, out)
    ]
    coordinator = elect_coordinator(good_tickets, randomness)
    urs = compute_urs(out.value for _, out in good_tickets)
    if len(valid) < shard_count * min_shard_size:
        raise ShardingError(
            f"{len(valid)} identities cannot fill {shard_count} shards of {min_shard_size}"
        )
    for salt in range(max_salt):
        membership: dict[int, list[Digest]] = {s: [] for s in range(shard_count)}
        for ident in valid:
            membership[assign_shard(ident, shard_count, salt, urs)].append(ident.address)
        if min(len(m) for m in membership.values()) >= min_shard_size:
            break
    else:
        raise ShardingError(f"no salt below {max_salt} yields shards of {min_shard_size}")
    return EpochContext(
        epoch_number=epoch_number,
        randomness=randomness,
        identities=tuple(valid),
        shard_count=shard_count,
        membership={s: tuple(m) for s, m in membership.items()},
        coordinator=coordinator,
        dss_index=select_dss(urs, shard_count),
        urs=urs,
        salt=salt,
    )


@dataclass(frozen=True)
class EpochSummary:
    epoch_number: int
    shard_roots: tuple[Digest, ...]
    global_root: Digest

    def to_json(self) -> dict:
        return {
            "epoch": self.epoch_number,
            "shard_roots": [r.hex() for r in self.shard_roots],
            "global_root": self.global_root.hex(),
        }


def finalize_epoch(
    epoch_number: int, shard_final_blocks: Mapping[int, Digest], shard_count: int
) -> EpochSummary:
    roots = []
    for shard in range(shard_count):
        if shard not in shard_final_blocks:
            raise ShardingError(f"missing final block hash for shard {shard}")
        roots.append(shard_final_blocks[shard])
    return EpochSummary(epoch_number, tuple(roots), merkle_root(roots))


def next_epoch_randomness(urs: Digest, global_root: Digest) -> Digest:
    return hash256(urs + global_root)
