"""Vehicular cloud: an append-only record store with role-gated history queries.

A run directory holds ``blocks.log``, ``messages.log`` and ``snapshots.log``.
Each log starts with the 4-byte magic ``IVCS`` and a version byte, followed
by records framed as ``u64 id | u8 kind | u32 length | canonical bytes``.
``index/`` holds the per-vehicle index, rebuilt from the logs if missing.
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, Iterator, List, Optional, Tuple

from .blocks import Block, DataSharePayload, TxKind, tx_json
from .crypto import Hash32
from .encoding import DecodeError, Reader, Writer
from .ledger import LedgerState
from .vanet import DeliveryVerdict, SafetyMessage

MAGIC = b"IVCS"
VERSION = 1
_FRAME = struct.Struct(">QBI")


class StorageFull(OSError):
    pass


class EncodingError(TypeError):
    pass


class AccessDenied(PermissionError):
    pass


class RecordKind(enum.IntEnum):
    BLOCK = 1
    MESSAGE = 2
    VERDICT = 3
    SNAPSHOT = 4


_FILES = {
    RecordKind.BLOCK: "blocks.log",
    RecordKind.MESSAGE: "messages.log",
    RecordKind.VERDICT: "messages.log",
    RecordKind.SNAPSHOT: "snapshots.log",
}


@dataclass(frozen=True)
class LedgerSnapshot:
    height: int
    tick: int
    block_hash: Hash32
    state: LedgerState

    def encode(self) -> bytes:
        w = Writer().u64(self.height).u64(self.tick).hash32(self.block_hash)
        return w.getvalue() + self.state.to_bytes()

    @classmethod
    def decode(cls, data: bytes) -> "LedgerSnapshot":
        r = Reader(data)
        height, tick, block_hash = r.u64(), r.u64(), r.hash32()
        maps = []
        for _ in range(3):
            maps.append({r.hash32(): r.u64() for _ in range(r.count())})
        r.finish()
        return cls(height, tick, block_hash, LedgerState(*maps))


def encode_record(record) -> Tuple[RecordKind, bytes]:
    if isinstance(record, Block):
        return RecordKind.BLOCK, record.to_bytes()
    if isinstance(record, SafetyMessage):
        return RecordKind.MESSAGE, record.encode()
    if isinstance(record, DeliveryVerdict):
        return RecordKind.VERDICT, record.encode()
    if isinstance(record, LedgerSnapshot):
        return RecordKind.SNAPSHOT, record.encode()
    raise EncodingError(f"cannot store {type(record).__name__}")


def decode_record(kind: RecordKind, payload: bytes):
    return {
        RecordKind.BLOCK: Block.from_bytes,
        RecordKind.MESSAGE: SafetyMessage.decode,
        RecordKind.VERDICT: DeliveryVerdict.decode,
        RecordKind.SNAPSHOT: LedgerSnapshot.decode,
    }[kind](payload)


def _vehicles_of(record) -> List[bytes]:
    if isinstance(record, Block):
        ids = [record.header.sealer_ivtp_id]
        for tx in record.transactions:
            ids.append(tx.sender_ivtp_id)
            p = tx.payload
            ids.extend(p.benefiters if isinstance(p, DataSharePayload) else (p.sender, p.recipient))
        return ids
    if isinstance(record, SafetyMessage):
        return [record.sender_ivtp_id]
    if isinstance(record, DeliveryVerdict):
        return [record.sender_ivtp_id, record.receiver_ivtp_id]
    if isinstance(record, LedgerSnapshot):
        return list(record.state.balances)
    return []


def read_frames(path) -> Iterator[Tuple[int, RecordKind, int, int]]:
    """Yield (id, kind, payload offset, payload length) for each framed record."""
    data = Path(path).read_bytes()
    name = Path(path).name
    if data[:4] != MAGIC or data[4:5] != bytes([VERSION]):
        raise DecodeError(f"{name}: bad magic or version")
    pos = 5
    position = 0
    while pos < len(data):
        if pos + _FRAME.size > len(data):
            raise DecodeError(f"{name}: record #{position} truncated frame at offset {pos}")
        rid, kind, length = _FRAME.unpack_from(data, pos)
        start = pos + _FRAME.size
        if start + length > len(data):
            raise DecodeError(f"{name}: record #{position} (id {rid}) overruns the file")
        try:
            kind = RecordKind(kind)
        except ValueError:
            raise DecodeError(f"{name}: record #{position} (id {rid}) has unknown kind {kind}") from None
        yield rid, kind, start, length
        pos = start + length
        position += 1


@dataclass
class _Location:
    file: str
    offset: int
    kind: RecordKind
    length: int


class CloudStore:
    """Append-only directory store. One writer; readers see only published records."""

    def __init__(self, root, max_bytes: Optional[int] = None):
        self.root = Path(root)
        self.max_bytes = max_bytes
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / "index").mkdir(exist_ok=True)
        self._locations: Dict[int, _Location] = {}
        self._by_vehicle: Dict[str, List[int]] = {}
        self._next_id = 1
        self._size = 0
        self._scan()

    # -- persistence ------------------------------------------------------

    def _scan(self) -> None:
        for name in sorted(set(_FILES.values())):
            path = self.root / name
            if not path.exists():
                continue
            self._size += path.stat().st_size
            for rid, kind, start, length in read_frames(path):
                self._locations[rid] = _Location(name, start, kind, length)
                self._next_id = max(self._next_id, rid + 1)
        index_path = self.root / "index" / "vehicles.json"
        saved = json.loads(index_path.read_text()) if index_path.exists() else None
        if saved is not None and saved.get("records") == len(self._locations):
            self._by_vehicle = saved["vehicles"]
        else:
            self._by_vehicle = {}
            for rid in sorted(self._locations):
                self._index(rid, self.get(rid))

    def _index(self, rid: int, record) -> None:
        for vid in dict.fromkeys(bytes(v) for v in _vehicles_of(record)):
            self._by_vehicle.setdefault(vid.hex(), []).append(rid)

    def append(self, record) -> int:
        kind, payload = encode_record(record)
        frame_size = _FRAME.size + len(payload)
        name = _FILES[kind]
        path = self.root / name
        new_file = not path.exists()
        extra = frame_size + (5 if new_file else 0)
        if self.max_bytes is not None and self._size + extra > self.max_bytes:
            raise StorageFull(f"store limit {self.max_bytes} bytes reached")
        rid = self._next_id
        with open(path, "ab") as fh:
            if new_file:
                fh.write(MAGIC + bytes([VERSION]))
            offset = fh.tell() + _FRAME.size
            fh.write(_FRAME.pack(rid, int(kind), len(payload)) + payload)
            fh.flush()
        # publish only after the bytes are written
        self._locations[rid] = _Location(name, offset, kind, len(payload))
        self._next_id += 1
        self._size += extra
        self._index(rid, record)
        return rid

    def flush_index(self) -> None:
        path = self.root / "index" / "vehicles.json"
        index = {"records": len(self._locations), "vehicles": self._by_vehicle}
        path.write_text(json.dumps(index, sort_keys=True))

    def close(self) -> None:
        self.flush_index()

    def __enter__(self) -> "CloudStore":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- reads ------------------------------------------------------------

    def ids(self) -> List[int]:
        return sorted(self._locations)

    def kind_of(self, rid: int) -> RecordKind:
        return self._locations[rid].kind

    def raw(self, rid: int) -> Tuple[RecordKind, bytes]:
        loc = self._locations[rid]
        with open(self.root / loc.file, "rb") as fh:
            fh.seek(loc.offset)
            return loc.kind, fh.read(loc.length)

    def get(self, rid: int):
        kind, payload = self.raw(rid)
        return decode_record(kind, payload)

    def records(self, kind: Optional[RecordKind] = None) -> Iterator[Tuple[int, object]]:
        for rid in self.ids():
            if kind is None or self._locations[rid].kind == kind:
                yield rid, self.get(rid)

    def raw_blocks(self) -> List[bytes]:
        return [self.raw(rid)[1] for rid in self.ids() if self._locations[rid].kind == RecordKind.BLOCK]

    def ids_for(self, vehicle: bytes) -> List[int]:
        return list(self._by_vehicle.get(bytes(vehicle).hex(), []))


def append(store: CloudStore, record) -> int:
    return store.append(record)


# ---------------------------------------------------------------------------
# Access control
# ---------------------------------------------------------------------------


class Role(str, enum.Enum):
    OWNER = "Owner"
    HOSPITAL = "Hospital"
    INSURANCE = "Insurance"
    POLICE = "Police"
    PUBLIC = "Public"


HEADER = "header"
TRANSACTION = "transaction"
MESSAGE = "message"
VERDICT = "verdict"
SNAPSHOT = "snapshot"
ALL_KINDS: Tuple[str, ...] = (HEADER, TRANSACTION, SNAPSHOT, MESSAGE, VERDICT)
_ON_CHAIN = (HEADER, TRANSACTION, SNAPSHOT)

SCOPES: Dict[Role, FrozenSet[str]] = {
    Role.PUBLIC: frozenset({HEADER}),
    Role.OWNER: frozenset(ALL_KINDS),
    Role.HOSPITAL: frozenset(ALL_KINDS),
    Role.INSURANCE: frozenset(ALL_KINDS),
    Role.POLICE: frozenset(ALL_KINDS),
}


@dataclass(frozen=True)
class AccessRole:
    role: Role
    # the vehicle an Owner speaks for
    owner: Optional[bytes] = None

    @property
    def scope(self) -> FrozenSet[str]:
        return SCOPES.get(self.role, frozenset())

    def permits(self, vehicle: bytes, kind: str) -> bool:
        if kind not in self.scope:
            return False
        if self.role is Role.OWNER:
            return self.owner is not None and bytes(self.owner) == bytes(vehicle)
        return True


def authorize(role: AccessRole, vehicle: bytes, kinds: Iterable[str]) -> None:
    for kind in kinds:
        if not role.permits(vehicle, kind):
            raise AccessDenied(f"{role.role.value} may not read {kind} records of {bytes(vehicle).hex()[:12]}")


@dataclass(frozen=True)
class HistoryRecord:
    kind: str
    record_id: int
    height: Optional[int]
    index: Optional[int]
    tick: int
    data: dict = field(compare=False, hash=False)

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "record_id": self.record_id,
            "height": self.height,
            "index": self.index,
            "tick": self.tick,
            "data": self.data,
        }


def _header_json(block: Block) -> dict:
    out = block.to_json()
    out.pop("transactions")
    return out


def _in_range(tick: int, tick_from: Optional[int], tick_to: Optional[int]) -> bool:
    return (tick_from is None or tick >= tick_from) and (tick_to is None or tick <= tick_to)


def query_history(
    store: CloudStore,
    role: AccessRole,
    vehicle: bytes,
    tick_from: Optional[int] = None,
    tick_to: Optional[int] = None,
    kinds: Optional[Iterable[str]] = None,
) -> List[HistoryRecord]:
    """Records involving ``vehicle`` within the inclusive tick range.

    On-chain records come first, ordered by (height, position in block) with
    the header before the transactions and the balance snapshot last; then
    messages and verdicts ordered by tick. ``kinds`` defaults to the role's
    full scope; asking for anything outside it raises AccessDenied.
    """
    wanted = tuple(kinds) if kinds is not None else tuple(k for k in ALL_KINDS if k in role.scope)
    unknown = set(wanted) - set(ALL_KINDS)
    if unknown:
        raise ValueError(f"unknown record kinds: {sorted(unknown)}")
    authorize(role, vehicle, wanted)
    vid = bytes(vehicle)
    on_chain: List[Tuple[tuple, HistoryRecord]] = []
    off_chain: List[Tuple[tuple, HistoryRecord]] = []
    for rid in store.ids_for(vid):
        record = store.get(rid)
        if isinstance(record, Block):
            tick = record.header.timestamp_ms
            if not _in_range(tick, tick_from, tick_to):
                continue
            if HEADER in wanted:
                rec = HistoryRecord(HEADER, rid, record.height, -1, tick, _header_json(record))
                on_chain.append(((record.height, 0, -1), rec))
            if TRANSACTION in wanted:
                for i, tx in enumerate(record.transactions):
                    if tx.involves(vid):
                        rec = HistoryRecord(TRANSACTION, rid, record.height, i, tick, tx_json(tx))
                        on_chain.append(((record.height, 1, i), rec))
        elif isinstance(record, LedgerSnapshot):
            if SNAPSHOT in wanted and _in_range(record.tick, tick_from, tick_to):
                data = {"balance": record.state.balances[vid], "block_hash": record.block_hash.hex()}
                rec = HistoryRecord(SNAPSHOT, rid, record.height, None, record.tick, data)
                on_chain.append(((record.height, 2, 0), rec))
        elif isinstance(record, SafetyMessage):
            if MESSAGE in wanted and _in_range(record.tick, tick_from, tick_to):
                off_chain.append(((record.tick, rid), HistoryRecord(MESSAGE, rid, None, None, record.tick, record.to_json())))
        elif isinstance(record, DeliveryVerdict):
            if VERDICT in wanted and _in_range(record.tick, tick_from, tick_to):
                off_chain.append(((record.tick, rid), HistoryRecord(VERDICT, rid, None, None, record.tick, record.to_json())))
    on_chain.sort(key=lambda pair: pair[0])
    off_chain.sort(key=lambda pair: pair[0])
    return [rec for _, rec in on_chain] + [rec for _, rec in off_chain]


@dataclass(frozen=True)
class ReputationReport:
    vehicle: str
    balance: int
    blocks_sealed: int
    messages_shared: int
    messages_benefited: int
    rejected_messages: int

    def to_json(self) -> dict:
        return dict(self.__dict__)


def reputation_report(store: CloudStore, role: AccessRole, vehicle: bytes) -> ReputationReport:
    """Counters recomputed from stored records on every call.

    ``messages_shared`` counts on-chain DataShare transactions sent by the
    vehicle, ``messages_benefited`` those listing it as a benefiter, and
    ``rejected_messages`` the legality rejections of messages claiming it as
    sender.
    """
    authorize(role, vehicle, ALL_KINDS)
    vid = bytes(vehicle)
    balance = None
    latest = -1
    sealed = shared = benefited = rejected = 0
    for rid in store.ids_for(vid):
        record = store.get(rid)
        if isinstance(record, Block):
            if record.header.sealer_ivtp_id == vid:
                sealed += 1
            for tx in record.transactions:
                if tx.kind is TxKind.DATA_SHARE:
                    shared += tx.sender_ivtp_id == vid
                    benefited += vid in tx.payload.benefiters
        elif isinstance(record, LedgerSnapshot):
            if record.height > latest:
                latest, balance = record.height, record.state.balances[vid]
        elif isinstance(record, DeliveryVerdict):
            rejected += record.sender_ivtp_id == vid and not record.accepted
    if balance is None:
        raise KeyError(f"vehicle {vid.hex()[:12]} has no ledger snapshot in the store")
    return ReputationReport(vid.hex(), balance, sealed, shared, benefited, rejected)
