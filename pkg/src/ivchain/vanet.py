"""Deterministic discrete-event simulation of vehicles sharing safety messages.

Time is integer ticks of one simulated millisecond. Every random choice
comes from a single ``random.Random(seed)`` owned by the world, drawn in a
fixed order:

* per transmission, for each candidate receiver in node-index order that is
  in radio range and not partitioned away: one ``random()`` draw decides the
  drop, then (if delivered) one ``randint(lo, hi)`` draw picks the latency;
* a TamperedBlockRelay draws its mutation right before its transmission.

Nothing else consumes randomness, so identical configs replay bit-for-bit.
"""

from __future__ import annotations

import enum
import heapq
import json
import math
import random
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

from .blocks import Block, Transaction, data_share
from .chain import (
    ConsensusParams,
    ChainStore,
    DuplicateBlock,
    InvalidBlock,
    NonceExhausted,
    build_block,
    extend,
    pack_transactions,
)
from .crypto import Hash32, double_sha256, keygen, sign, verify_quiet
from .encoding import DecodeError, Reader, Writer
from .ledger import Registry, VehicleIdentity
from .pod import PodProof, beacons_since, make_beacon

BEACON_INTERVAL = 250
ROUND_TICKS = 100
HASH_BUDGET = 64
ACK_WINDOW = 200
FRESHNESS_WINDOW = 500
REPLAY_DELAYS = (50, 300, 900)
FORGE_INTERVAL = 400

_MESSAGE_DOMAIN = b"ivchain/safety\x00"


class UnknownSender(KeyError):
    pass


class MessageKind(enum.IntEnum):
    HAZARD_AHEAD = 0
    CONGESTION_REPORT = 1
    INTERSECTION_CROSSING = 2

    @property
    def label(self) -> str:
        return {0: "HazardAhead", 1: "CongestionReport", 2: "IntersectionCrossing"}[self.value]

    @classmethod
    def parse(cls, text: str) -> "MessageKind":
        for kind in cls:
            if kind.label == text or kind.name == text:
                return kind
        raise ValueError(f"unknown message kind {text!r}")


class Adversary(str, enum.Enum):
    REPLAY = "ReplayAttacker"
    FORGED_IVTP = "ForgedIVTP"
    TAMPERED_RELAY = "TamperedBlockRelay"


@dataclass(frozen=True)
class SafetyMessage:
    sender_ivtp_id: Hash32
    kind: MessageKind
    x: int
    y: int
    tick: int
    msg_nonce: int
    signature: bytes = b""

    def _write_body(self, w: Writer) -> Writer:
        return (
            w.hash32(self.sender_ivtp_id)
            .u64(int(self.kind))
            .u64(self.x)
            .u64(self.y)
            .u64(self.tick)
            .u64(self.msg_nonce)
        )

    def signing_bytes(self) -> bytes:
        return _MESSAGE_DOMAIN + self._write_body(Writer()).getvalue()

    def encode(self) -> bytes:
        return self._write_body(Writer()).blob(self.signature).getvalue()

    @classmethod
    def decode(cls, data: bytes) -> "SafetyMessage":
        r = Reader(data)
        sender = r.hash32()
        raw_kind = r.u64()
        try:
            kind = MessageKind(raw_kind)
        except ValueError:
            raise DecodeError(f"unknown message kind {raw_kind}") from None
        msg = cls(sender, kind, r.u64(), r.u64(), r.u64(), r.u64(), r.blob())
        r.finish()
        return msg

    @property
    def digest(self) -> Hash32:
        return double_sha256(self.encode())

    def signed(self, secret: bytes) -> "SafetyMessage":
        return replace(self, signature=sign(secret, self.signing_bytes()))

    def to_json(self) -> dict:
        return {
            "digest": self.digest.hex(),
            "sender": self.sender_ivtp_id.hex(),
            "kind": self.kind.label,
            "location": [self.x, self.y],
            "tick": self.tick,
            "msg_nonce": self.msg_nonce,
        }


@dataclass(frozen=True)
class SimConfig:
    node_count: int = 5
    seed: int = 0
    latency_ticks: Tuple[int, int] = (1, 20)
    drop_probability: float = 0.0
    radio_range_m: float = 300.0
    base_difficulty: int = 8
    unit_m: int = 1000
    reward_amount: int = 1
    initial_balance: int = 100
    duration_ticks: int = 10_000

    def __post_init__(self) -> None:
        object.__setattr__(self, "latency_ticks", tuple(self.latency_ticks))
        lo, hi = self.latency_ticks
        if not 0.0 <= self.drop_probability <= 1.0:
            raise ValueError("drop_probability must lie in [0, 1]")
        if self.duration_ticks <= 0:
            raise ValueError("duration_ticks must be positive")
        if not 1 <= lo <= hi:
            raise ValueError("latency_ticks must satisfy 1 <= min <= max")
        if self.node_count < 1:
            raise ValueError("node_count must be at least 1")
        if self.base_difficulty < 1 or self.unit_m < 1:
            raise ValueError("base_difficulty and unit_m must be positive")
        if self.reward_amount < 1 or self.initial_balance < 0:
            raise ValueError("reward_amount must be positive, initial_balance non-negative")
        if self.radio_range_m < 0:
            raise ValueError("radio_range_m cannot be negative")

    @property
    def consensus(self) -> ConsensusParams:
        return ConsensusParams(self.base_difficulty, self.unit_m, self.reward_amount, self.initial_balance)

    @classmethod
    def keys(cls) -> Tuple[str, ...]:
        return tuple(cls.__dataclass_fields__)

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any], base: Optional["SimConfig"] = None) -> "SimConfig":
        unknown = set(data) - set(cls.keys())
        if unknown:
            raise ValueError(f"unknown configuration keys: {', '.join(sorted(unknown))}")
        return replace(base or cls(), **dict(data))

    @classmethod
    def from_file(cls, path, base: Optional["SimConfig"] = None) -> "SimConfig":
        return cls.from_mapping(load_toml(path), base)

    def to_json(self) -> dict:
        out = {k: getattr(self, k) for k in self.keys()}
        out["latency_ticks"] = list(self.latency_ticks)
        return out


def load_toml(path) -> dict:
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    with open(path, "rb") as fh:
        return tomllib.load(fh)


@dataclass(frozen=True)
class Route:
    """Piecewise-linear path driven at constant speed; the vehicle parks at the end."""

    waypoints: Tuple[Tuple[float, float], ...]
    speed_mps: float = 0.0

    def __post_init__(self) -> None:
        pts = tuple((float(x), float(y)) for x, y in self.waypoints)
        if not pts:
            raise ValueError("a route needs at least one waypoint")
        if any(x < 0 or y < 0 for x, y in pts):
            raise ValueError("map coordinates are non-negative meters")
        object.__setattr__(self, "waypoints", pts)

    @property
    def length(self) -> float:
        return sum(math.dist(a, b) for a, b in zip(self.waypoints, self.waypoints[1:]))

    def odometer(self, tick: int) -> float:
        return min(self.length, self.speed_mps * tick / 1000.0)

    def position(self, tick: int) -> Tuple[float, float]:
        remaining = self.odometer(tick)
        for a, b in zip(self.waypoints, self.waypoints[1:]):
            seg = math.dist(a, b)
            if remaining <= seg and seg > 0:
                f = remaining / seg
                return (a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1]))
            remaining -= seg
        return self.waypoints[-1]


@dataclass(frozen=True)
class VehicleSpec:
    label: str
    route: Route


@dataclass(frozen=True)
class LogEntry:
    tick: int
    node: str
    kind: str
    digest: str

    def to_json(self) -> str:
        return json.dumps({"tick": self.tick, "node": self.node, "kind": self.kind, "digest": self.digest})


class EventLog(list):
    """Ordered (tick, node, event kind, payload digest) records."""

    def record(self, tick: int, node: str, kind: str, digest: bytes) -> None:
        self.append(LogEntry(tick, node, kind, digest.hex()))

    def to_jsonl(self) -> str:
        return "".join(e.to_json() + "\n" for e in self)

    @classmethod
    def from_jsonl(cls, text: str) -> "EventLog":
        log = cls()
        for line in text.splitlines():
            if line.strip():
                d = json.loads(line)
                log.append(LogEntry(d["tick"], d["node"], d["kind"], d["digest"]))
        return log

    def of_kind(self, kind: str) -> List[LogEntry]:
        return [e for e in self if e.kind == kind]


@dataclass(frozen=True)
class Legality:
    accepted: bool
    reason: str = "Accepted"


ACCEPT = Legality(True)


def check_legality(
    seen: set,
    message: SafetyMessage,
    now: int,
    registry: Mapping,
    freshness: int = FRESHNESS_WINDOW,
) -> Legality:
    """Network-layer admission test; ``seen`` holds accepted (sender, nonce) pairs.

    On accept the pair is recorded in ``seen``.
    """
    public_key = registry.get(message.sender_ivtp_id)
    if public_key is None:
        return Legality(False, "UnknownIVTP")
    if not verify_quiet(public_key, message.signing_bytes(), message.signature):
        return Legality(False, "BadSignature")
    key = (bytes(message.sender_ivtp_id), message.msg_nonce)
    if key in seen:
        return Legality(False, "NonceReplay")
    if message.tick > now or now - message.tick > freshness:
        return Legality(False, "Stale")
    seen.add(key)
    return ACCEPT


@dataclass(frozen=True)
class DeliveryVerdict:
    """One legality decision, kept for the vehicular cloud."""

    tick: int
    receiver_ivtp_id: Hash32
    sender_ivtp_id: Hash32
    message_digest: Hash32
    accepted: bool
    reason: str

    def encode(self) -> bytes:
        return (
            Writer()
            .u64(self.tick)
            .hash32(self.receiver_ivtp_id)
            .hash32(self.sender_ivtp_id)
            .hash32(self.message_digest)
            .u64(int(self.accepted))
            .text(self.reason)
            .getvalue()
        )

    @classmethod
    def decode(cls, data: bytes) -> "DeliveryVerdict":
        r = Reader(data)
        tick, receiver, sender, digest, accepted = r.u64(), r.hash32(), r.hash32(), r.hash32(), r.u64()
        if accepted > 1:
            raise DecodeError("accepted flag must be 0 or 1")
        out = cls(tick, receiver, sender, digest, bool(accepted), r.text())
        r.finish()
        return out

    def to_json(self) -> dict:
        return {
            "tick": self.tick,
            "receiver": self.receiver_ivtp_id.hex(),
            "sender": self.sender_ivtp_id.hex(),
            "message_digest": self.message_digest.hex(),
            "accepted": self.accepted,
            "reason": self.reason,
        }


# ---------------------------------------------------------------------------
# Nodes
# ---------------------------------------------------------------------------


class Node:
    honest = True
    infinite_range = False

    def __init__(self, index: int, label: str, route: Route):
        self.index = index
        self.label = label
        self.route = route

    def position(self, tick: int) -> Tuple[float, float]:
        return self.route.position(tick)

    def on_message(self, world: "World", message: SafetyMessage, src: int) -> None:
        pass

    def on_ack(self, world: "World", digest: Hash32, acker: Hash32) -> None:
        pass

    def on_tx(self, world: "World", tx: Transaction) -> None:
        pass

    def on_blocks(self, world: "World", raws: Sequence[bytes], src: int) -> None:
        pass

    def on_request(self, world: "World", missing: Hash32, locator: frozenset, src: int) -> None:
        pass


class FullNode(Node):
    """Validates and relays blocks and transactions."""

    def __init__(self, index: int, label: str, route: Route, registry: Registry, params: ConsensusParams):
        super().__init__(index, label, route)
        self.store = ChainStore(registry, params)
        self.mempool: Dict[Hash32, Transaction] = {}
        self.seen_digests: set = set()
        self.raw: Dict[Hash32, bytes] = {}

    def on_tx(self, world, tx):
        if tx.txid in self.mempool:
            return
        self.mempool[tx.txid] = tx
        world.transmit(self.index, "tx", tx)

    def on_blocks(self, world, raws, src):
        fresh: List[bytes] = []
        for raw in raws:
            digest = double_sha256(raw)
            if digest in self.seen_digests:
                continue
            self.seen_digests.add(digest)
            try:
                block = Block.from_bytes(raw)
            except (DecodeError, ValueError):
                world.log.record(world.tick, self.label, "block_reject:Undecodable", digest)
                continue
            if block.hash in self.store:
                continue
            if block.hash in self.store.orphans:
                # same header, different body: one copy is tampered, so let a resend retry once the parent lands
                if self.raw.get(block.hash) != raw:
                    self.seen_digests.discard(digest)
                continue
            self.raw[block.hash] = raw
            fresh.extend(self.accept_block(world, block, src))
        if fresh:
            world.transmit(self.index, "blocks", tuple(fresh))

    def accept_block(self, world, block: Block, src: Optional[int]) -> List[bytes]:
        """Extend the local store; returns raw blocks newly stored, for relaying."""
        try:
            report = extend(self.store, block)
        except InvalidBlock as exc:
            world.log.record(world.tick, self.label, f"block_reject:{exc.verdict.failure.value}", double_sha256(self.raw.pop(block.hash)))
            return []
        except DuplicateBlock:
            return []
        if report.orphaned:
            world.log.record(world.tick, self.label, "block_orphan", double_sha256(self.raw[block.hash]))
            if src is not None:
                world.transmit(self.index, "request", (self._missing_root(block), self.locator()), only=src)
            return []
        for h, verdict in report.rejected:
            world.log.record(world.tick, self.label, f"block_reject:{verdict.failure.value}", double_sha256(self.raw.pop(h)))
        out = []
        for h in report.stored:
            raw = self.raw[h]
            world.log.record(world.tick, self.label, "block_store", double_sha256(raw))
            out.append(raw)
        if report.rolled_back:
            world.log.record(world.tick, self.label, "reorg", report.old_tip)
        if report.tip_changed:
            world.log.record(world.tick, self.label, "tip", report.new_tip)
        return out

    def _missing_root(self, block: Block) -> Hash32:
        cursor = block.header.previous_hash
        while cursor in self.store.orphans:
            cursor = self.store.orphans[cursor].header.previous_hash
        return cursor

    def locator(self) -> frozenset:
        chain = self.store.best_chain()
        picks, step, i = [], 1, len(chain) - 1
        while i > 0:
            picks.append(chain[i].hash)
            if len(picks) >= 8:
                step *= 2
            i -= step
        picks.append(chain[0].hash)
        return frozenset(picks)

    def on_request(self, world, missing, locator, src):
        if missing not in self.store:
            return
        branch = self.store.ancestors(missing)
        start = 0
        for i, b in enumerate(branch):
            if b.hash in locator:
                start = i + 1
        world.transmit(self.index, "blocks", tuple(self.raw_of(b) for b in branch[start:]), only=src)

    def raw_of(self, block: Block) -> bytes:
        raw = self.raw.get(block.hash)
        if raw is None:
            raw = self.raw[block.hash] = block.to_bytes()
        return raw

    def announce_tip(self, world) -> None:
        if self.store.tip_block.height > 0:
            world.transmit(self.index, "blocks", (self.raw_of(self.store.tip_block),))


class RoadsideUnit(FullNode):
    infinite_range = True


class Vehicle(FullNode):
    def __init__(self, index, label, route, identity: VehicleIdentity, registry, params):
        super().__init__(index, label, route, registry, params)
        self.identity = identity
        self.accepted: set = set()
        self.beacons: list = []
        self.msg_nonce = 0
        self.tx_nonce = 0
        self.pending: Dict[Hash32, List[Hash32]] = {}
        self._odometer_m = 0

    @property
    def ivtp_id(self) -> Hash32:
        return self.identity.ivtp_id

    def drive(self, world) -> None:
        meters = int(self.route.odometer(world.tick))
        beacon = make_beacon(self.ivtp_id, self.identity.secret, world.tick, meters - self._odometer_m)
        self._odometer_m = meters
        self.beacons.append(beacon)
        world.log.record(world.tick, self.label, "beacon", double_sha256(beacon.encode()))

    def emit(self, world, kind: MessageKind) -> SafetyMessage:
        x, y = self.position(world.tick)
        msg = SafetyMessage(self.ivtp_id, kind, round(x), round(y), world.tick, self.msg_nonce).signed(self.identity.secret)
        self.msg_nonce += 1
        self.pending[msg.digest] = []
        world.messages.setdefault(msg.digest, msg)
        world.log.record(world.tick, self.label, "msg_send", msg.digest)
        world.broadcast(self.label, msg)
        world.schedule(world.tick + ACK_WINDOW, self.index, "commit", msg.digest)
        return msg

    def on_message(self, world, message, src):
        verdict = check_legality(self.accepted, message, world.tick, world.registry)
        world.verdicts.append(DeliveryVerdict(world.tick, self.ivtp_id, message.sender_ivtp_id, message.digest, verdict.accepted, verdict.reason))
        if not verdict.accepted:
            world.log.record(world.tick, self.label, f"msg_reject:{verdict.reason}", message.digest)
            return
        world.log.record(world.tick, self.label, "msg_accept", message.digest)
        sender = world.by_ivtp.get(message.sender_ivtp_id)
        if sender is not None:
            world.transmit(self.index, "ack", (message.digest, self.ivtp_id), only=sender)

    def on_ack(self, world, digest, acker):
        benefiters = self.pending.get(digest)
        if benefiters is not None and acker not in benefiters and acker != self.ivtp_id:
            benefiters.append(acker)

    def commit(self, world, digest: Hash32) -> None:
        benefiters = sorted(self.pending.pop(digest))
        tx = data_share(self.ivtp_id, self.identity.secret, digest, benefiters, self.tx_nonce)
        self.tx_nonce += 1
        world.log.record(world.tick, self.label, "tx_share", tx.txid)
        self.on_tx(world, tx)

    def try_seal(self, world) -> Optional[Block]:
        tip = self.store.tip_block
        state = self.store.ledger
        if world.tick <= tip.header.timestamp_ms:
            return None
        txs = pack_transactions(state, self.mempool.values(), self.store.registry)
        if not txs:
            return None
        spent_until = state.last_seal.get(self.ivtp_id, -1)
        pod = PodProof.from_beacons(beacons_since(self.beacons, spent_until, world.tick))
        try:
            block = build_block(tip.header, txs, self.identity, pod, world.tick, self.store.params, max_tries=HASH_BUDGET)
        except NonceExhausted:
            return None
        raw = block.to_bytes()
        self.raw[block.hash] = raw
        self.seen_digests.add(double_sha256(raw))
        world.log.record(world.tick, self.label, "block_seal", block.hash)
        fresh = self.accept_block(world, block, None)
        if fresh:
            world.transmit(self.index, "blocks", tuple(fresh))
        return block


class ReplayAttacker(Node):
    honest = False

    def on_message(self, world, message, src):
        for delay in REPLAY_DELAYS:
            world.schedule(world.tick + delay, self.index, "replay", message)

    def replay(self, world, message: SafetyMessage) -> None:
        world.log.record(world.tick, self.label, "msg_replay", message.digest)
        world.broadcast(self.label, message)


class ForgedIvtpSender(Node):
    """Alternates between impersonating a registered id and using its own unregistered one."""

    honest = False

    def __init__(self, index, label, route):
        super().__init__(index, label, route)
        self.keys = keygen(f"forger/{label}")
        self.own_id = double_sha256(self.keys.public)
        self.count = 0

    def forge(self, world) -> None:
        victims = sorted(world.registry)
        if self.count % 2 == 0 and victims:
            claimed = victims[(self.count // 2) % len(victims)]
        else:
            claimed = self.own_id
        x, y = self.position(world.tick)
        msg = SafetyMessage(claimed, MessageKind.HAZARD_AHEAD, round(x), round(y), world.tick, self.count)
        msg = msg.signed(self.keys.secret)
        self.count += 1
        world.log.record(world.tick, self.label, "msg_forge", msg.digest)
        world.broadcast(self.label, msg)


class TamperedBlockRelay(Node):
    """Relays every block it hears after corrupting it."""

    honest = False

    def __init__(self, index, label, route):
        super().__init__(index, label, route)
        self.keys = keygen(f"tamperer/{label}")
        self.seen: set = set()

    def on_blocks(self, world, raws, src):
        forged = []
        for raw in raws:
            digest = double_sha256(raw)
            if digest in self.seen:
                continue
            self.seen.add(digest)
            bad = self._corrupt(world, raw)
            world.log.record(world.tick, self.label, "block_forge", double_sha256(bad))
            forged.append(bad)
        if forged:
            world.transmit(self.index, "blocks", tuple(forged))

    def _corrupt(self, world, raw: bytes) -> bytes:
        mode = world.rng.randrange(3)
        if mode == 2:
            # claim the block for an unregistered sealer
            block = Block.from_bytes(raw)
            header = replace(block.header, sealer_ivtp_id=double_sha256(self.keys.public))
            return replace(block, header=header).to_bytes()
        pos = world.rng.randrange(len(raw))
        flip = world.rng.randrange(1, 256)
        out = bytearray(raw)
        out[pos] ^= flip
        return bytes(out)


# ---------------------------------------------------------------------------
# World
# ---------------------------------------------------------------------------


@dataclass(order=True)
class _Event:
    tick: int
    seq: int
    node: int = field(compare=False)
    kind: str = field(compare=False)
    payload: Any = field(compare=False, default=None)


class World:
    def __init__(
        self,
        config: SimConfig,
        roster: Sequence[VehicleSpec],
        rsu_position: Optional[Tuple[float, float]] = None,
    ):
        self.config = config
        self.params = config.consensus
        self.rng = random.Random(config.seed)
        self.tick = 0
        self.started = False
        self._queue: List[_Event] = []
        self._seq = 0
        self.log = EventLog()
        self.messages: Dict[Hash32, SafetyMessage] = {}
        self.verdicts: List[DeliveryVerdict] = []
        self._groups: Optional[Dict[str, int]] = None

        labels = [spec.label for spec in roster]
        if len(set(labels)) != len(labels):
            raise ValueError("vehicle labels must be unique")
        identities = [VehicleIdentity.generate(spec.label, config.seed) for spec in roster]
        self.registry = Registry(identities)
        self.nodes: List[Node] = []
        for spec, ident in zip(roster, identities):
            self.nodes.append(Vehicle(len(self.nodes), spec.label, spec.route, ident, self.registry, self.params))
        if rsu_position is not None:
            self.nodes.append(RoadsideUnit(len(self.nodes), "rsu", Route((rsu_position,)), self.registry, self.params))
        self.by_label = {n.label: n.index for n in self.nodes}
        self.by_ivtp = {n.ivtp_id: n.index for n in self.vehicles}

        for v in self.vehicles:
            self.schedule(BEACON_INTERVAL, v.index, "drive")
            self.schedule(ROUND_TICKS, v.index, "seal")

    @property
    def vehicles(self) -> List[Vehicle]:
        return [n for n in self.nodes if isinstance(n, Vehicle)]

    @property
    def full_nodes(self) -> List[FullNode]:
        return [n for n in self.nodes if isinstance(n, FullNode)]

    def node(self, label: str) -> Node:
        try:
            return self.nodes[self.by_label[label]]
        except KeyError:
            raise UnknownSender(label) from None

    # -- scheduling -------------------------------------------------------

    def schedule(self, tick: int, node: int, kind: str, payload: Any = None) -> None:
        self._seq += 1
        heapq.heappush(self._queue, _Event(tick, self._seq, node, kind, payload))

    def schedule_emission(self, tick: int, sender: str, kind: MessageKind) -> None:
        node = self.node(sender)
        if not isinstance(node, Vehicle):
            raise UnknownSender(sender)
        self.schedule(tick, node.index, "emit", kind)

    def schedule_partition(self, start: int, end: int, groups: Sequence[Sequence[str]]) -> None:
        assignment = {}
        for gid, group in enumerate(groups):
            for label in group:
                self.node(label)
                assignment[label] = gid
        self.schedule(start, -1, "partition", assignment)
        self.schedule(end, -1, "heal")

    def inject_adversary(self, behavior: Adversary | str, label: Optional[str] = None, position: Optional[Tuple[float, float]] = None) -> Node:
        behavior = Adversary(behavior)
        index = len(self.nodes)
        label = label or f"{behavior.value.lower()}-{index}"
        if label in self.by_label:
            raise ValueError(f"label {label} already in use")
        if position is None:
            position = self.vehicles[0].position(self.tick) if self.vehicles else (0.0, 0.0)
        route = Route((position,))
        cls = {
            Adversary.REPLAY: ReplayAttacker,
            Adversary.FORGED_IVTP: ForgedIvtpSender,
            Adversary.TAMPERED_RELAY: TamperedBlockRelay,
        }[behavior]
        node = cls(index, label, route)
        self.nodes.append(node)
        self.by_label[label] = index
        if behavior is Adversary.FORGED_IVTP:
            self.schedule(self.tick + FORGE_INTERVAL, index, "forge")
        return node

    # -- network ----------------------------------------------------------

    def _linked(self, a: Node, b: Node) -> bool:
        if self._groups is not None and self._groups.get(a.label, -1 - a.index) != self._groups.get(b.label, -1 - b.index):
            return False
        if a.infinite_range or b.infinite_range:
            return True
        return math.dist(a.position(self.tick), b.position(self.tick)) <= self.config.radio_range_m

    def transmit(self, src: int, kind: str, payload: Any, only: Optional[int] = None) -> List[Tuple[str, int]]:
        """Schedule deliveries from ``src``; returns (receiver, arrival tick) pairs."""
        sender = self.nodes[src]
        lo, hi = self.config.latency_ticks
        p = self.config.drop_probability
        schedule = []
        targets = [self.nodes[only]] if only is not None else self.nodes
        for node in targets:
            if node.index == src or not self._linked(sender, node):
                continue
            if kind == "msg" and isinstance(node, RoadsideUnit):
                continue
            dropped = self.rng.random() < p
            if dropped:
                continue
            arrival = self.tick + self.rng.randint(lo, hi)
            self.schedule(arrival, node.index, "deliver_" + kind, (payload, src))
            schedule.append((node.label, arrival))
        return schedule

    def broadcast(self, sender: str, message: SafetyMessage) -> List[Tuple[str, int]]:
        if sender not in self.by_label:
            raise UnknownSender(sender)
        return self.transmit(self.by_label[sender], "msg", message)

    # -- main loop --------------------------------------------------------

    def step(self, until_tick: int) -> "World":
        if until_tick < self.tick:
            raise ValueError(f"cannot step back from {self.tick} to {until_tick}")
        self.started = True
        while self._queue and self._queue[0].tick <= until_tick:
            ev = heapq.heappop(self._queue)
            self.tick = ev.tick
            self._dispatch(ev)
        self.tick = until_tick
        return self

    def run(self) -> "World":
        return self.step(self.config.duration_ticks)

    def _dispatch(self, ev: _Event) -> None:
        if ev.node == -1:
            if ev.kind == "partition":
                self._groups = ev.payload
                self.log.record(self.tick, "world", "partition", double_sha256(json.dumps(sorted(ev.payload.items())).encode()))
            else:
                self._groups = None
                self.log.record(self.tick, "world", "heal", double_sha256(b"heal"))
                for node in self.full_nodes:
                    node.announce_tip(self)
            return
        node = self.nodes[ev.node]
        kind = ev.kind
        if kind == "drive":
            node.drive(self)
            self.schedule(self.tick + BEACON_INTERVAL, node.index, "drive")
        elif kind == "seal":
            node.try_seal(self)
            self.schedule(self.tick + ROUND_TICKS, node.index, "seal")
        elif kind == "emit":
            node.emit(self, ev.payload)
        elif kind == "commit":
            node.commit(self, ev.payload)
        elif kind == "replay":
            node.replay(self, ev.payload)
        elif kind == "forge":
            node.forge(self)
            self.schedule(self.tick + FORGE_INTERVAL, node.index, "forge")
        elif kind == "deliver_msg":
            msg, src = ev.payload
            node.on_message(self, msg, src)
        elif kind == "deliver_ack":
            (digest, acker), _ = ev.payload
            node.on_ack(self, digest, acker)
        elif kind == "deliver_tx":
            tx, _ = ev.payload
            node.on_tx(self, tx)
        elif kind == "deliver_blocks":
            raws, src = ev.payload
            node.on_blocks(self, raws, src)
        elif kind == "deliver_request":
            (missing, locator), src = ev.payload
            node.on_request(self, missing, locator, src)
        else:  # pragma: no cover
            raise ValueError(f"unknown event {kind}")

    # -- views ------------------------------------------------------------

    @property
    def honest_full_nodes(self) -> List[FullNode]:
        return [n for n in self.full_nodes if n.honest]

    def tips(self) -> Dict[str, Hash32]:
        return {n.label: n.store.tip for n in self.honest_full_nodes}

    def reference_node(self) -> FullNode:
        return self.vehicles[0] if self.vehicles else self.full_nodes[0]


def broadcast(world: World, sender: str, message: SafetyMessage) -> List[Tuple[str, int]]:
    return world.broadcast(sender, message)


def step(world: World, until_tick: int) -> World:
    return world.step(until_tick)


def inject_adversary(world: World, behavior: Adversary | str, **kwargs) -> World:
    world.inject_adversary(behavior, **kwargs)
    return world
