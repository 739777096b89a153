"""IV-TP balances, reward transfers and the leader rule."""

from __future__ import annotations

import json
from collections.abc import Mapping
from dataclasses import dataclass, field, replace
from typing import Dict, Iterator, List, Optional, Tuple

from .crypto import Hash32, KeyPair, double_sha256, keygen
from .encoding import Writer

DEFAULT_INITIAL_BALANCE = 100
DEFAULT_REWARD_AMOUNT = 1


class LedgerError(Exception):
    pass


class DuplicateIdentity(LedgerError):
    pass


class UnknownVehicle(LedgerError):
    pass


class InsufficientBalance(LedgerError):
    pass


class SelfTransfer(LedgerError):
    pass


class ZeroAmount(LedgerError):
    pass


class EmptyLedger(LedgerError):
    pass


@dataclass(frozen=True)
class VehicleIdentity:
    public_key: bytes
    label: str = ""
    keys: Optional[KeyPair] = field(default=None, repr=False, compare=False)

    @property
    def ivtp_id(self) -> Hash32:
        return double_sha256(self.public_key)

    @property
    def secret(self) -> bytes:
        if self.keys is None:
            raise ValueError(f"no signing key held for {self.label or self.ivtp_id}")
        return self.keys.secret

    @classmethod
    def generate(cls, label: str, seed: bytes | str | int = 0) -> "VehicleIdentity":
        keys = keygen(f"{seed}/{label}")
        return cls(public_key=keys.public, label=label, keys=keys)


class Registry(Mapping):
    """ivtp_id -> public key for every provisioned vehicle."""

    def __init__(self, identities=()) -> None:
        self._keys: Dict[Hash32, bytes] = {}
        self._labels: Dict[Hash32, str] = {}
        for ident in identities:
            self.add(ident)

    def add(self, identity: VehicleIdentity) -> None:
        vid = identity.ivtp_id
        if vid in self._keys:
            raise DuplicateIdentity(f"{identity.label or vid.hex()} already registered")
        self._keys[vid] = identity.public_key
        self._labels[vid] = identity.label

    def label(self, ivtp_id: bytes) -> str:
        return self._labels.get(Hash32(ivtp_id), ivtp_id.hex()[:12])

    def __getitem__(self, key: bytes) -> bytes:
        return self._keys[key]

    def __iter__(self) -> Iterator[Hash32]:
        return iter(self._keys)

    def __len__(self) -> int:
        return len(self._keys)

    def to_json(self) -> dict:
        return {
            vid.hex(): {"public_key": pk.hex(), "label": self._labels[vid]}
            for vid, pk in self._keys.items()
        }

    @classmethod
    def from_json(cls, data: dict) -> "Registry":
        reg = cls()
        for entry in data.values():
            reg.add(VehicleIdentity(bytes.fromhex(entry["public_key"]), entry["label"]))
        return reg


@dataclass(frozen=True)
class LedgerState:
    """Immutable snapshot. Every operation returns a new state."""

    balances: Mapping = field(default_factory=dict)
    # highest transaction nonce accepted per sender
    nonces: Mapping = field(default_factory=dict)
    # timestamp of each vehicle's most recent sealed block; beacons before it are spent
    last_seal: Mapping = field(default_factory=dict)

    @property
    def supply(self) -> int:
        return sum(self.balances.values())

    def balance(self, ivtp_id: bytes) -> int:
        try:
            return self.balances[ivtp_id]
        except KeyError:
            raise UnknownVehicle(ivtp_id.hex()) from None

    def nonce_watermark(self, ivtp_id: bytes) -> int:
        return self.nonces.get(ivtp_id, -1)

    def with_nonce(self, ivtp_id: Hash32, nonce: int) -> "LedgerState":
        return replace(self, nonces={**self.nonces, ivtp_id: nonce})

    def with_seal(self, ivtp_id: Hash32, tick: int) -> "LedgerState":
        return replace(self, last_seal={**self.last_seal, ivtp_id: tick})

    def to_bytes(self) -> bytes:
        w = Writer().count(len(self.balances))
        for vid in sorted(self.balances):
            w.hash32(vid).u64(self.balances[vid])
        w.count(len(self.nonces))
        for vid in sorted(self.nonces):
            w.hash32(vid).u64(self.nonces[vid])
        w.count(len(self.last_seal))
        for vid in sorted(self.last_seal):
            w.hash32(vid).u64(self.last_seal[vid])
        return w.getvalue()

    def to_json(self) -> dict:
        return {
            "balances": {vid.hex(): self.balances[vid] for vid in sorted(self.balances)},
            "supply": self.supply,
        }


def register(
    identity: VehicleIdentity,
    ledger: LedgerState,
    initial_balance: int = DEFAULT_INITIAL_BALANCE,
) -> LedgerState:
    vid = identity.ivtp_id
    if vid in ledger.balances:
        raise DuplicateIdentity(vid.hex())
    return replace(ledger, balances={**ledger.balances, vid: initial_balance})


def genesis_ledger(registry: Registry, initial_balance: int = DEFAULT_INITIAL_BALANCE) -> LedgerState:
    return LedgerState(balances={vid: initial_balance for vid in registry})


def apply_transfer(ledger: LedgerState, sender: bytes, recipient: bytes, amount: int) -> LedgerState:
    if amount < 1:
        raise ZeroAmount(f"transfer amount {amount}")
    if sender == recipient:
        raise SelfTransfer(sender.hex())
    for vid in (sender, recipient):
        if vid not in ledger.balances:
            raise UnknownVehicle(vid.hex())
    if ledger.balances[sender] < amount:
        raise InsufficientBalance(
            f"{sender.hex()[:12]} holds {ledger.balances[sender]}, needs {amount}"
        )
    balances = dict(ledger.balances)
    balances[sender] -= amount
    balances[recipient] += amount
    return replace(ledger, balances=balances)


@dataclass(frozen=True)
class RewardEntry:
    tx_index: int
    benefiter: Hash32
    sealer: Hash32
    amount: int
    skipped: Optional[str] = None


@dataclass(frozen=True)
class RewardReport:
    entries: Tuple[RewardEntry, ...] = ()

    @property
    def paid(self) -> List[RewardEntry]:
        return [e for e in self.entries if e.skipped is None]

    @property
    def skipped(self) -> List[RewardEntry]:
        return [e for e in self.entries if e.skipped is not None]


def reward_for_block(
    ledger: LedgerState, block, reward_amount: int = DEFAULT_REWARD_AMOUNT
) -> Tuple[LedgerState, RewardReport]:
    """Each benefiter of each DataShare pays the sealer ``reward_amount``.

    Benefiters who cannot pay, and sealers who benefited from their own
    block, are skipped and listed in the report; the block stays valid.
    """
    from .blocks import TxKind

    sealer = block.header.sealer_ivtp_id
    entries = []
    for index, tx in enumerate(block.transactions):
        if tx.kind is not TxKind.DATA_SHARE:
            continue
        for benefiter in tx.payload.benefiters:
            skipped = None
            try:
                ledger = apply_transfer(ledger, benefiter, sealer, reward_amount)
            except LedgerError as exc:
                skipped = type(exc).__name__
            entries.append(RewardEntry(index, benefiter, sealer, reward_amount, skipped))
    return ledger, RewardReport(tuple(entries))


def leader(ledger: LedgerState) -> Hash32:
    """Vehicle with the most IV-TP; ties go to the smallest id."""
    if not ledger.balances:
        raise EmptyLedger("no registered vehicles")
    return min(ledger.balances, key=lambda vid: (-ledger.balances[vid], bytes(vid)))


def ledger_json(ledger: LedgerState) -> str:
    return json.dumps(ledger.to_json(), sort_keys=True, indent=2) + "\n"
