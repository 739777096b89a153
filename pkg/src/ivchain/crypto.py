"""Hashing, Merkle trees and Ed25519 signatures.

Everything here is a pure function of its inputs; values are immutable.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import lru_cache
from typing import List, Sequence, Tuple

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

PUBLIC_KEY_SIZE = 32
SECRET_KEY_SIZE = 32
SIGNATURE_SIZE = 64

LEFT = "left"
RIGHT = "right"


class EmptyLeafSet(ValueError):
    pass


class IndexOutOfRange(IndexError):
    pass


class MalformedKey(ValueError):
    pass


class MalformedSignature(ValueError):
    pass


class Hash32(bytes):
    """A 32-byte digest. Compares and orders like the raw bytes."""

    def __new__(cls, value: bytes = bytes(32)) -> "Hash32":
        if len(value) != 32:
            raise ValueError(f"Hash32 needs exactly 32 bytes, got {len(value)}")
        return super().__new__(cls, value)

    @classmethod
    def from_hex(cls, text: str) -> "Hash32":
        if len(text) != 64:
            raise ValueError("Hash32 hex must be 64 characters")
        return cls(bytes.fromhex(text))

    def __str__(self) -> str:
        return self.hex()

    def __repr__(self) -> str:
        return f"Hash32({self.hex()[:16]}…)"

    def leading_zero_bits(self) -> int:
        return 256 - int.from_bytes(self, "big").bit_length()


ZERO_HASH = Hash32(bytes(32))


def double_sha256(data: bytes) -> Hash32:
    return Hash32(hashlib.sha256(hashlib.sha256(data).digest()).digest())


# ---------------------------------------------------------------------------
# Merkle trees
# ---------------------------------------------------------------------------

ProofStep = Tuple[Hash32, str]


@dataclass(frozen=True)
class MerkleTree:
    leaves: Tuple[Hash32, ...]
    levels: Tuple[Tuple[Hash32, ...], ...]

    @property
    def root(self) -> Hash32:
        return self.levels[-1][0]

    @classmethod
    def from_payloads(cls, payloads: Sequence[bytes]) -> "MerkleTree":
        return cls.from_leaf_hashes([double_sha256(p) for p in payloads])

    @classmethod
    def from_leaf_hashes(cls, leaves: Sequence[Hash32]) -> "MerkleTree":
        if not leaves:
            raise EmptyLeafSet("a Merkle tree needs at least one leaf")
        level = tuple(leaves)
        levels = [level]
        while len(level) > 1:
            padded = level + (level[-1],) if len(level) % 2 else level
            level = tuple(
                double_sha256(padded[i] + padded[i + 1])
                for i in range(0, len(padded), 2)
            )
            levels.append(level)
        return cls(leaves=tuple(leaves), levels=tuple(levels))


def merkle_root(leaf_payloads: Sequence[bytes]) -> Hash32:
    """Root over double-SHA256 leaf hashes; odd levels repeat their last node."""
    return MerkleTree.from_payloads(leaf_payloads).root


def merkle_proof(tree: MerkleTree, leaf_index: int) -> List[ProofStep]:
    if not 0 <= leaf_index < len(tree.leaves):
        raise IndexOutOfRange(f"leaf {leaf_index} not in tree of {len(tree.leaves)}")
    proof: List[ProofStep] = []
    index = leaf_index
    for level in tree.levels[:-1]:
        if index % 2 == 0:
            sibling = level[index + 1] if index + 1 < len(level) else level[index]
            proof.append((sibling, RIGHT))
        else:
            proof.append((level[index - 1], LEFT))
        index //= 2
    return proof


def verify_merkle_proof(leaf_hash: bytes, proof: Sequence[ProofStep], root: bytes) -> bool:
    acc = bytes(leaf_hash)
    for sibling, side in proof:
        if side == RIGHT:
            acc = double_sha256(acc + sibling)
        elif side == LEFT:
            acc = double_sha256(sibling + acc)
        else:
            return False
    return acc == bytes(root)


# ---------------------------------------------------------------------------
# Signatures
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KeyPair:
    secret: bytes
    public: bytes

    def __repr__(self) -> str:
        return f"KeyPair(public={self.public.hex()[:16]}…)"


def keygen(seed: bytes | str | int) -> KeyPair:
    """Deterministic Ed25519 keypair derived from an arbitrary seed."""
    if isinstance(seed, int):
        seed = seed.to_bytes(16, "big", signed=True)
    elif isinstance(seed, str):
        seed = seed.encode()
    secret = hashlib.sha256(b"ivchain/keygen/" + seed).digest()
    private = Ed25519PrivateKey.from_private_bytes(secret)
    public = private.public_key().public_bytes(
        serialization.Encoding.Raw, serialization.PublicFormat.Raw
    )
    return KeyPair(secret=secret, public=public)


@lru_cache(maxsize=1024)
def _private_key(secret: bytes) -> Ed25519PrivateKey:
    return Ed25519PrivateKey.from_private_bytes(secret)


def sign(secret: bytes, message: bytes) -> bytes:
    if len(secret) != SECRET_KEY_SIZE:
        raise MalformedKey(f"secret key must be {SECRET_KEY_SIZE} bytes")
    return _private_key(bytes(secret)).sign(message)


@lru_cache(maxsize=1 << 16)
def _verify(public: bytes, message: bytes, signature: bytes) -> bool:
    try:
        key = Ed25519PublicKey.from_public_bytes(public)
    except ValueError as exc:
        raise MalformedKey(str(exc)) from exc
    try:
        key.verify(signature, message)
    except InvalidSignature:
        return False
    return True


def verify(public: bytes, message: bytes, signature: bytes) -> bool:
    if len(public) != PUBLIC_KEY_SIZE:
        raise MalformedKey(f"public key must be {PUBLIC_KEY_SIZE} bytes")
    if len(signature) != SIGNATURE_SIZE:
        raise MalformedSignature(f"signature must be {SIGNATURE_SIZE} bytes")
    # verification is pure, so repeated checks of the same gossip are cached
    return _verify(bytes(public), bytes(message), bytes(signature))


def verify_quiet(public: bytes, message: bytes, signature: bytes) -> bool:
    """verify() that treats malformed inputs as a failed check."""
    try:
        return verify(public, message, signature)
    except (MalformedKey, MalformedSignature):
        return False
