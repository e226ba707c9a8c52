"""Hashing, Ed25519 signatures, binary Merkle trees and a signature-based VRF."""
from __future__ import annotations

import enum
import functools
import hashlib
from dataclasses import dataclass, field
from typing import Sequence

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

from .constants import DIGEST_SIZE, HASH_NAME
from .encoding import Reader, Writer

Digest = bytes

SIGNATURE_SIZE = 64
PUBLIC_KEY_SIZE = 32


def hash256(data: bytes) -> Digest:
    return hashlib.new(HASH_NAME, data).digest()


EMPTY_ROOT = hash256(b"")


@dataclass(frozen=True)
class KeyPair:
    secret: bytes = field(repr=False)
    public: bytes
    address: Digest

    def sign(self, message: bytes) -> "Signature":
        return sign(self.secret, message)


@dataclass(frozen=True)
class Signature:
    value: bytes
    signer: bytes

    def encode(self, w: Writer) -> None:
        w.blob(self.value).blob(self.signer)

    @classmethod
    def decode(cls, r: Reader) -> "Signature":
        return cls(r.blob(limit=SIGNATURE_SIZE), r.blob(limit=PUBLIC_KEY_SIZE))

    def to_json(self) -> dict:
        return {"sig": self.value.hex(), "signer": self.signer.hex()}

    @classmethod
    def from_json(cls, obj: dict) -> "Signature":
        return cls(bytes.fromhex(obj["sig"]), bytes.fromhex(obj["signer"]))


@functools.lru_cache(maxsize=4096)
def _private_key(secret: bytes) -> Ed25519PrivateKey:
    return Ed25519PrivateKey.from_private_bytes(secret)


def address_of(public: bytes) -> Digest:
    return hash256(public)


def keygen(seed: bytes) -> KeyPair:
    """Deterministic key pair from 32 bytes of seed material."""
    if len(seed) != 32:
        raise ValueError("keygen seed must be 32 bytes")
    public = _private_key(seed).public_key().public_bytes(
        serialization.Encoding.Raw, serialization.PublicFormat.Raw
    )
    return KeyPair(secret=seed, public=public, address=address_of(public))


def sign(secret: bytes, message: bytes) -> Signature:
    key = _private_key(secret)
    public = key.public_key().public_bytes(
        serialization.Encoding.Raw, serialization.PublicFormat.Raw
    )
    return Signature(key.sign(message), public)


# Verification is pure, so memoising it is safe. The simulator re-checks
# the same quorum signatures at several places.
@functools.lru_cache(maxsize=1 << 18)
def _verify_raw(public: bytes, message: bytes, signature: bytes) -> bool:
    if len(public) != PUBLIC_KEY_SIZE or len(signature) != SIGNATURE_SIZE:
        return False
    try:
        Ed25519PublicKey.from_public_bytes(public).verify(signature, message)
    except (InvalidSignature, ValueError):
        return False
    return True


def verify_sig(public: bytes, message: bytes, sig: Signature | None) -> bool:
    if sig is None or sig.signer != public:
        return False
    return _verify_raw(bytes(public), bytes(message), bytes(sig.value))


# ---------------------------------------------------------------- merkle


class Side(enum.IntEnum):
    """Position of the sibling relative to the running hash."""

    LEFT = 0
    RIGHT = 1


@dataclass(frozen=True)
class MerkleTree:
    leaves: tuple[Digest, ...]
    levels: tuple[tuple[Digest, ...], ...]

    @property
    def root(self) -> Digest:
        return self.levels[-1][0]

    @property
    def height(self) -> int:
        return len(self.levels) - 1


@dataclass(frozen=True)
class MerkleProof:
    leaf_index: int
    path: tuple[tuple[Digest, Side], ...]

    def encode(self) -> bytes:
        w = Writer().u64(self.leaf_index).u32(len(self.path))
        for sibling, side in self.path:
            w.digest(sibling).u8(int(side))
        return w.getvalue()

    @classmethod
    def decode(cls, data: bytes) -> "MerkleProof":
        r = Reader(data)
        index = r.u64()
        n = r.u32()
        if n > 64:
            raise ValueError("merkle path too long")
        path = []
        for _ in range(n):
            sibling = r.digest()
            side = r.u8()
            if side > 1:
                raise ValueError(f"invalid side byte {side}")
            path.append((sibling, Side(side)))
        r.finish()
        return cls(index, tuple(path))

    def to_json(self) -> dict:
        return {
            "index": self.leaf_index,
            "path": [[s.hex(), int(side)] for s, side in self.path],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "MerkleProof":
        return cls(
            obj["index"], tuple((bytes.fromhex(s), Side(side)) for s, side in obj["path"])
        )


def merkle_parent(left: Digest, right: Digest) -> Digest:
    return hash256(left + right)


def merkle_build(leaves: Sequence[Digest]) -> MerkleTree:
    """Pairwise-hash ``leaves`` up to a single root.

    Odd levels duplicate their last node. An empty leaf list yields the hash
    of the empty string; a single leaf is its own root.
    """
    leaves = tuple(leaves)
    for leaf in leaves:
        if len(leaf) != DIGEST_SIZE:
            raise ValueError("merkle leaves must be 32-byte digests")
    if not leaves:
        return MerkleTree((), ((EMPTY_ROOT,),))
    levels = [leaves]
    level = leaves
    while len(level) > 1:
        if len(level) % 2:
            level = level + (level[-1],)
        level = tuple(
            merkle_parent(level[i], level[i + 1]) for i in range(0, len(level), 2)
        )
        levels.append(level)
    return MerkleTree(leaves, tuple(levels))


def merkle_root(leaves: Sequence[Digest]) -> Digest:
    return merkle_build(leaves).root


def merkle_prove(tree: MerkleTree, index: int) -> MerkleProof:
    if not 0 <= index < len(tree.leaves):
        raise IndexError(f"leaf index {index} out of range for {len(tree.leaves)} leaves")
    path = []
    pos = index
    for level in tree.levels[:-1]:
        if pos % 2:
            path.append((level[pos - 1], Side.LEFT))
        else:
            sibling = level[pos + 1] if pos + 1 < len(level) else level[pos]
            path.append((sibling, Side.RIGHT))
        pos //= 2
    return MerkleProof(index, tuple(path))


def merkle_verify(root: Digest, leaf: Digest, proof: MerkleProof) -> bool:
    # The index bits must agree with the recorded sides, so a proof whose
    # index was tampered with is rejected even when the path still hashes up.
    if proof.leaf_index < 0 or proof.leaf_index >> len(proof.path):
        return False
    node = leaf
    for depth, (sibling, side) in enumerate(proof.path):
        bit = (proof.leaf_index >> depth) & 1
        if side is Side.LEFT:
            if not bit:
                return False
            node = merkle_parent(sibling, node)
        else:
            if bit:
                return False
            node = merkle_parent(node, sibling)
    return node == root


# ------------------------------------------------------------------- vrf


@dataclass(frozen=True)
class VrfOutput:
    value: Digest
    proof: Signature

    def to_json(self) -> dict:
        return {"value": self.value.hex(), "proof": self.proof.to_json()}

    @classmethod
    def from_json(cls, obj: dict) -> "VrfOutput":
        return cls(bytes.fromhex(obj["value"]), Signature.from_json(obj["proof"]))


def vrf_eval(secret: bytes, seed: bytes) -> VrfOutput:
    # Relies on Ed25519 signatures being deterministic.
    proof = sign(secret, seed)
    return VrfOutput(hash256(proof.value), proof)


def vrf_verify(public: bytes, seed: bytes, out: VrfOutput) -> bool:
    return verify_sig(public, seed, out.proof) and out.value == hash256(out.proof.value)
