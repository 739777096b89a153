"""Transactions, block headers and blocks with their canonical encodings."""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from functools import cached_property
from typing import Tuple, Union

from .crypto import ZERO_HASH, Hash32, MerkleTree, double_sha256, sign, verify_quiet
from .encoding import DecodeError, Reader, Writer
from .pod import EMPTY_POD, PodProof

_TX_DOMAIN = b"ivchain/tx\x00"
HEADER_SIZE = 8 + 32 + 32 + 8 + 8 + 8 + 32 + 32
NONCE_OFFSET = 8 + 32 + 32 + 8 + 8


class TxKind(enum.IntEnum):
    DATA_SHARE = 0
    REWARD_TRANSFER = 1


@dataclass(frozen=True)
class DataSharePayload:
    message_digest: Hash32
    benefiters: Tuple[Hash32, ...] = ()

    def write(self, w: Writer) -> None:
        w.hash32(self.message_digest).count(len(self.benefiters))
        for b in self.benefiters:
            w.hash32(b)

    @classmethod
    def read(cls, r: Reader) -> "DataSharePayload":
        digest = r.hash32()
        return cls(digest, tuple(r.hash32() for _ in range(r.count())))


@dataclass(frozen=True)
class TransferPayload:
    sender: Hash32
    recipient: Hash32
    amount: int

    def write(self, w: Writer) -> None:
        w.hash32(self.sender).hash32(self.recipient).u64(self.amount)

    @classmethod
    def read(cls, r: Reader) -> "TransferPayload":
        return cls(r.hash32(), r.hash32(), r.u64())


Payload = Union[DataSharePayload, TransferPayload]


@dataclass(frozen=True)
class Transaction:
    kind: TxKind
    sender_ivtp_id: Hash32
    payload: Payload
    nonce: int
    signature: bytes = b""

    def _write_body(self, w: Writer) -> Writer:
        if (self.kind is TxKind.DATA_SHARE) != isinstance(self.payload, DataSharePayload):
            raise ValueError(f"payload {type(self.payload).__name__} does not match {self.kind.name}")
        w.u64(int(self.kind)).hash32(self.sender_ivtp_id)
        self.payload.write(w)
        return w.u64(self.nonce)

    def signing_bytes(self) -> bytes:
        return _TX_DOMAIN + self._write_body(Writer()).getvalue()

    def write(self, w: Writer) -> None:
        self._write_body(w).blob(self.signature)

    @classmethod
    def read(cls, r: Reader) -> "Transaction":
        raw_kind = r.u64()
        try:
            kind = TxKind(raw_kind)
        except ValueError:
            raise DecodeError(f"unknown transaction kind {raw_kind}") from None
        sender = r.hash32()
        payload = (DataSharePayload if kind is TxKind.DATA_SHARE else TransferPayload).read(r)
        return cls(kind, sender, payload, r.u64(), r.blob())

    def signed(self, secret: bytes) -> "Transaction":
        return replace(self, signature=sign(secret, self.signing_bytes()))

    def verify(self, public_key: bytes) -> bool:
        return verify_quiet(public_key, self.signing_bytes(), self.signature)

    @cached_property
    def txid(self) -> Hash32:
        return double_sha256(canonical_encode(self))

    def involves(self, ivtp_id: bytes) -> bool:
        if self.sender_ivtp_id == ivtp_id:
            return True
        if isinstance(self.payload, DataSharePayload):
            return ivtp_id in self.payload.benefiters
        return ivtp_id in (self.payload.sender, self.payload.recipient)


def data_share(sender, secret: bytes, message_digest: Hash32, benefiters, nonce: int) -> Transaction:
    payload = DataSharePayload(message_digest, tuple(benefiters))
    return Transaction(TxKind.DATA_SHARE, sender, payload, nonce).signed(secret)


def reward_transfer(sender, secret: bytes, recipient, amount: int, nonce: int) -> Transaction:
    payload = TransferPayload(sender, recipient, amount)
    return Transaction(TxKind.REWARD_TRANSFER, sender, payload, nonce).signed(secret)


@dataclass(frozen=True)
class BlockHeader:
    height: int
    previous_hash: Hash32
    merkle_root: Hash32
    timestamp_ms: int
    difficulty: int
    nonce: int
    sealer_ivtp_id: Hash32
    pod_digest: Hash32

    def write(self, w: Writer) -> None:
        (
            w.u64(self.height)
            .hash32(self.previous_hash)
            .hash32(self.merkle_root)
            .u64(self.timestamp_ms)
            .u64(self.difficulty)
            .u64(self.nonce)
            .hash32(self.sealer_ivtp_id)
            .hash32(self.pod_digest)
        )

    @classmethod
    def read(cls, r: Reader) -> "BlockHeader":
        return cls(r.u64(), r.hash32(), r.hash32(), r.u64(), r.u64(), r.u64(), r.hash32(), r.hash32())

    def block_hash(self) -> Hash32:
        return double_sha256(canonical_encode(self))


@dataclass(frozen=True)
class Block:
    header: BlockHeader
    transactions: Tuple[Transaction, ...]
    pod: PodProof = EMPTY_POD

    @cached_property
    def hash(self) -> Hash32:
        return self.header.block_hash()

    @property
    def height(self) -> int:
        return self.header.height

    def body_merkle_root(self) -> Hash32:
        return MerkleTree.from_payloads([canonical_encode(tx) for tx in self.transactions]).root

    def to_bytes(self) -> bytes:
        w = Writer()
        self.header.write(w)
        self.pod.encode(w)
        w.count(len(self.transactions))
        for tx in self.transactions:
            tx.write(w)
        return w.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Block":
        r = Reader(data)
        header = BlockHeader.read(r)
        pod = PodProof.read(r)
        txs = tuple(Transaction.read(r) for _ in range(r.count()))
        r.finish()
        return cls(header, txs, pod)

    def to_json(self) -> dict:
        """Inspection view; hashing always goes through canonical_encode."""
        h = self.header
        return {
            "height": h.height,
            "hash": self.hash.hex(),
            "previous_hash": h.previous_hash.hex(),
            "merkle_root": h.merkle_root.hex(),
            "timestamp_ms": h.timestamp_ms,
            "nonce": h.nonce,
            "difficulty": h.difficulty,
            "sealer": h.sealer_ivtp_id.hex(),
            "pod_digest": h.pod_digest.hex(),
            "pod_score_m": self.pod.claimed_score_m,
            "pod_beacons": len(self.pod.beacons),
            "transactions": [tx_json(tx) for tx in self.transactions],
        }


def tx_json(tx: Transaction) -> dict:
    out = {
        "txid": tx.txid.hex(),
        "kind": "DataShare" if tx.kind is TxKind.DATA_SHARE else "RewardTransfer",
        "sender": tx.sender_ivtp_id.hex(),
        "nonce": tx.nonce,
    }
    if isinstance(tx.payload, DataSharePayload):
        out["message_digest"] = tx.payload.message_digest.hex()
        out["benefiters"] = [b.hex() for b in tx.payload.benefiters]
    else:
        out["from"] = tx.payload.sender.hex()
        out["to"] = tx.payload.recipient.hex()
        out["amount"] = tx.payload.amount
    return out


def canonical_encode(x: Union[Transaction, BlockHeader]) -> bytes:
    """Fixed field order, u64 big-endian integers, raw hashes, length-prefixed blobs."""
    w = Writer()
    x.write(w)
    return w.getvalue()


def decode_transaction(data: bytes) -> Transaction:
    r = Reader(data)
    tx = Transaction.read(r)
    r.finish()
    return tx


def decode_header(data: bytes) -> BlockHeader:
    r = Reader(data)
    header = BlockHeader.read(r)
    r.finish()
    return header


GENESIS_TX = Transaction(
    TxKind.DATA_SHARE, ZERO_HASH, DataSharePayload(double_sha256(b"genesis")), 0
)


def _make_genesis() -> Block:
    header = BlockHeader(
        height=0,
        previous_hash=ZERO_HASH,
        merkle_root=MerkleTree.from_payloads([canonical_encode(GENESIS_TX)]).root,
        timestamp_ms=0,
        difficulty=0,
        nonce=0,
        sealer_ivtp_id=ZERO_HASH,
        pod_digest=EMPTY_POD.digest,
    )
    return Block(header, (GENESIS_TX,), EMPTY_POD)


GENESIS = _make_genesis()
