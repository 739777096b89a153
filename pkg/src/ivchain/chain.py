"""Block building, validation, and the fork-resolving chain store."""

from __future__ import annotations

import enum
import hashlib
import json
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from .blocks import (
    GENESIS,
    NONCE_OFFSET,
    Block,
    BlockHeader,
    DataSharePayload,
    Transaction,
    canonical_encode,
)
from .crypto import Hash32, MerkleTree
from .encoding import DecodeError, U64_MAX
from .ledger import (
    DEFAULT_INITIAL_BALANCE,
    DEFAULT_REWARD_AMOUNT,
    LedgerError,
    LedgerState,
    RewardReport,
    VehicleIdentity,
    apply_transfer,
    genesis_ledger,
    reward_for_block,
)
from .pod import DEFAULT_UNIT_M, PodProof, effective_difficulty, pod_failure

ORPHAN_LIMIT = 64
MAX_BLOCK_TXS = 64


class NoValidTransactions(ValueError):
    pass


class PodInvalid(ValueError):
    pass


class NonceExhausted(RuntimeError):
    pass


class DuplicateBlock(ValueError):
    pass


class Failure(str, enum.Enum):
    LINKAGE = "Linkage"
    HEIGHT = "HeightMismatch"
    DIFFICULTY = "DifficultyTarget"
    EMPTY = "EmptyBlock"
    MERKLE = "MerkleRootMismatch"
    TIMESTAMP = "TimestampNotMonotonic"
    POD = "PodInvalid"
    UNKNOWN_SENDER = "UnknownVehicle"
    SIGNATURE = "BadSignature"
    NONCE_REPLAY = "NonceReplay"
    BENEFITER = "InvalidBenefiter"
    TRANSFER_OWNER = "TransferNotOwned"
    BALANCE = "TransferInfeasible"
    GENESIS = "GenesisMismatch"


@dataclass(frozen=True)
class Verdict:
    failure: Optional[Failure] = None
    detail: str = ""

    @property
    def ok(self) -> bool:
        return self.failure is None

    def __bool__(self) -> bool:
        return self.ok

    def __str__(self) -> str:
        if self.ok:
            return "Ok"
        return f"{self.failure.value}: {self.detail}" if self.detail else self.failure.value


OK = Verdict()


class InvalidBlock(ValueError):
    def __init__(self, verdict: Verdict, block_hash: Optional[Hash32] = None):
        super().__init__(str(verdict))
        self.verdict = verdict
        self.block_hash = block_hash


@dataclass(frozen=True)
class ConsensusParams:
    base_difficulty: int = 8
    unit_m: int = DEFAULT_UNIT_M
    reward_amount: int = DEFAULT_REWARD_AMOUNT
    initial_balance: int = DEFAULT_INITIAL_BALANCE


# ---------------------------------------------------------------------------
# Building
# ---------------------------------------------------------------------------


def _solve(header: BlockHeader, start: int, max_tries: Optional[int]) -> int:
    raw = bytearray(canonical_encode(header))
    target = 1 << (256 - header.difficulty)
    stop = U64_MAX + 1 if max_tries is None else min(U64_MAX + 1, start + max_tries)
    sha = hashlib.sha256
    for nonce in range(start, stop):
        raw[NONCE_OFFSET:NONCE_OFFSET + 8] = nonce.to_bytes(8, "big")
        if int.from_bytes(sha(sha(raw).digest()).digest(), "big") < target:
            return nonce
    raise NonceExhausted(f"no nonce in [{start}, {stop}) meets difficulty {header.difficulty}")


def build_block(
    parent: BlockHeader,
    txs: Sequence[Transaction],
    sealer: VehicleIdentity,
    pod: PodProof,
    clock: int,
    params: ConsensusParams = ConsensusParams(),
    *,
    max_tries: Optional[int] = None,
) -> Block:
    """Seal ``txs`` on top of ``parent``, searching the header nonce from 0 upward.

    ``max_tries`` bounds the search (the simulator's per-round hash budget);
    NonceExhausted is raised when it runs out.
    """
    if not txs:
        raise NoValidTransactions("a block needs at least one transaction")
    sealer_id = sealer.ivtp_id
    total = 0
    last_tick = -1
    for beacon in pod.beacons:
        if beacon.vehicle_ivtp_id != sealer_id or not beacon.verify(sealer.public_key):
            raise PodInvalid("beacon not signed by the sealer")
        if not last_tick < beacon.tick <= clock:
            raise PodInvalid(f"beacon tick {beacon.tick} out of order")
        last_tick = beacon.tick
        total += beacon.distance_m
    if total != pod.claimed_score_m:
        raise PodInvalid(f"claimed {pod.claimed_score_m} m but beacons sum to {total} m")
    if clock <= parent.timestamp_ms:
        raise ValueError(f"timestamp {clock} must exceed parent's {parent.timestamp_ms}")

    header = BlockHeader(
        height=parent.height + 1,
        previous_hash=parent.block_hash(),
        merkle_root=MerkleTree.from_payloads([canonical_encode(tx) for tx in txs]).root,
        timestamp_ms=clock,
        difficulty=effective_difficulty(params.base_difficulty, total, params.unit_m),
        nonce=0,
        sealer_ivtp_id=sealer_id,
        pod_digest=pod.digest,
    )
    nonce = _solve(header, 0, max_tries)
    return Block(replace(header, nonce=nonce), tuple(txs), pod)


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


def apply_transaction(state: LedgerState, tx: Transaction, registry: Mapping) -> LedgerState:
    """Fold one transaction into ``state`` or raise InvalidBlock."""
    sender = tx.sender_ivtp_id
    public_key = registry.get(sender)
    if public_key is None:
        raise InvalidBlock(Verdict(Failure.UNKNOWN_SENDER, sender.hex()))
    if not tx.verify(public_key):
        raise InvalidBlock(Verdict(Failure.SIGNATURE, tx.txid.hex()))
    if tx.nonce <= state.nonce_watermark(sender):
        raise InvalidBlock(Verdict(Failure.NONCE_REPLAY, f"{sender.hex()[:12]} nonce {tx.nonce}"))
    if isinstance(tx.payload, DataSharePayload):
        seen = set()
        for b in tx.payload.benefiters:
            if b == sender or b in seen or b not in registry:
                raise InvalidBlock(Verdict(Failure.BENEFITER, b.hex()))
            seen.add(b)
    else:
        if tx.payload.sender != sender:
            raise InvalidBlock(Verdict(Failure.TRANSFER_OWNER, tx.txid.hex()))
        try:
            state = apply_transfer(state, sender, tx.payload.recipient, tx.payload.amount)
        except LedgerError as exc:
            raise InvalidBlock(Verdict(Failure.BALANCE, f"{type(exc).__name__}: {exc}")) from None
    return state.with_nonce(sender, tx.nonce)


def apply_block(
    block: Block,
    parent: Optional[Block],
    state: LedgerState,
    registry: Mapping,
    params: ConsensusParams,
) -> Tuple[LedgerState, RewardReport]:
    """Validate ``block`` against its parent and return the successor state.

    Rules run in a fixed order and the first failure is raised as InvalidBlock.
    """
    h = block.header
    if parent is None:
        if block != GENESIS:
            raise InvalidBlock(Verdict(Failure.GENESIS))
        return state, RewardReport()
    if h.previous_hash != parent.hash:
        raise InvalidBlock(Verdict(Failure.LINKAGE, h.previous_hash.hex()))
    if h.height != parent.height + 1:
        raise InvalidBlock(Verdict(Failure.HEIGHT, str(h.height)))
    if block.hash.leading_zero_bits() < h.difficulty:
        raise InvalidBlock(Verdict(Failure.DIFFICULTY, f"needs {h.difficulty} zero bits"))
    if not block.transactions:
        raise InvalidBlock(Verdict(Failure.EMPTY))
    if block.body_merkle_root() != h.merkle_root:
        raise InvalidBlock(Verdict(Failure.MERKLE))
    if h.timestamp_ms <= parent.header.timestamp_ms:
        raise InvalidBlock(Verdict(Failure.TIMESTAMP, str(h.timestamp_ms)))
    reason = pod_failure(h, block.pod, registry, state.last_seal, params.base_difficulty, params.unit_m)
    if reason is not None:
        raise InvalidBlock(Verdict(Failure.POD, reason))
    for tx in block.transactions:
        state = apply_transaction(state, tx, registry)
    state, report = reward_for_block(state, block, params.reward_amount)
    return state.with_seal(h.sealer_ivtp_id, h.timestamp_ms), report


def validate_block(
    block: Block,
    parent: Optional[Block],
    ledger: LedgerState,
    registry: Mapping,
    params: ConsensusParams = ConsensusParams(),
) -> Verdict:
    """``parent=None`` marks the genesis slot."""
    try:
        apply_block(block, parent, ledger, registry, params)
    except InvalidBlock as exc:
        return exc.verdict
    return OK


def pack_transactions(
    state: LedgerState,
    candidates: Iterable[Transaction],
    registry: Mapping,
    limit: int = MAX_BLOCK_TXS,
) -> List[Transaction]:
    """Greedy selection of candidates that apply cleanly in (sender, nonce) order."""
    chosen = []
    for tx in sorted(candidates, key=lambda t: (bytes(t.sender_ivtp_id), t.nonce, bytes(t.txid))):
        if len(chosen) >= limit:
            break
        try:
            state = apply_transaction(state, tx, registry)
        except InvalidBlock:
            continue
        chosen.append(tx)
    return chosen


# ---------------------------------------------------------------------------
# Store and fork choice
# ---------------------------------------------------------------------------


@dataclass
class ExtendReport:
    tip_changed: bool
    old_tip: Hash32
    new_tip: Hash32
    rolled_back: List[Hash32] = field(default_factory=list)
    applied: List[Hash32] = field(default_factory=list)
    stored: List[Hash32] = field(default_factory=list)
    orphaned: bool = False
    rejected: List[Tuple[Hash32, Verdict]] = field(default_factory=list)


def _fork_key(block: Block) -> Tuple[int, bytes]:
    # larger is better: height first, then the smaller hash
    return (block.height, bytes(b ^ 0xFF for b in block.hash))


class ChainStore:
    """One node's view of the block tree. Single writer: mutate only via extend()."""

    def __init__(self, registry: Mapping, params: ConsensusParams = ConsensusParams(), genesis_state: Optional[LedgerState] = None):
        self.registry = registry
        self.params = params
        self.blocks: Dict[Hash32, Block] = {GENESIS.hash: GENESIS}
        self.children: Dict[Hash32, List[Hash32]] = {GENESIS.hash: []}
        if genesis_state is None:
            genesis_state = genesis_ledger(registry, params.initial_balance)
        self.states: Dict[Hash32, LedgerState] = {GENESIS.hash: genesis_state}
        self.reports: Dict[Hash32, RewardReport] = {GENESIS.hash: RewardReport()}
        self.orphans: "OrderedDict[Hash32, Block]" = OrderedDict()
        self.tip: Hash32 = GENESIS.hash

    @property
    def tip_block(self) -> Block:
        return self.blocks[self.tip]

    @property
    def ledger(self) -> LedgerState:
        return self.states[self.tip]

    def __contains__(self, block_hash: bytes) -> bool:
        return block_hash in self.blocks

    def ancestors(self, block_hash: Hash32) -> List[Block]:
        """Blocks from genesis to ``block_hash`` inclusive."""
        out = []
        cursor = block_hash
        while True:
            block = self.blocks[cursor]
            out.append(block)
            if block.height == 0:
                break
            cursor = block.header.previous_hash
        out.reverse()
        return out

    def best_chain(self) -> List[Block]:
        return self.ancestors(self.tip)

    def missing_parent(self, block: Block) -> bool:
        return block.header.previous_hash not in self.blocks

    def _store(self, block: Block) -> None:
        parent = self.blocks[block.header.previous_hash]
        state, report = apply_block(block, parent, self.states[parent.hash], self.registry, self.params)
        self.blocks[block.hash] = block
        self.children[block.hash] = []
        self.children[parent.hash].append(block.hash)
        self.states[block.hash] = state
        self.reports[block.hash] = report

    def _path_diff(self, old: Hash32, new: Hash32) -> Tuple[List[Hash32], List[Hash32]]:
        a, b = self.blocks[old], self.blocks[new]
        rolled, applied = [], []
        while a.height > b.height:
            rolled.append(a.hash)
            a = self.blocks[a.header.previous_hash]
        while b.height > a.height:
            applied.append(b.hash)
            b = self.blocks[b.header.previous_hash]
        while a.hash != b.hash:
            rolled.append(a.hash)
            applied.append(b.hash)
            a = self.blocks[a.header.previous_hash]
            b = self.blocks[b.header.previous_hash]
        applied.reverse()
        return rolled, applied


def extend(store: ChainStore, block: Block) -> ExtendReport:
    """Store ``block``, connect any orphans waiting on it, and rerun fork choice."""
    if block.hash in store.blocks or block.hash in store.orphans:
        raise DuplicateBlock(block.hash.hex())
    old_tip = store.tip
    report = ExtendReport(False, old_tip, old_tip)
    if store.missing_parent(block):
        store.orphans[block.hash] = block
        while len(store.orphans) > ORPHAN_LIMIT:
            store.orphans.popitem(last=False)
        report.orphaned = True
        return report

    store._store(block)  # raises InvalidBlock before anything is recorded
    report.stored.append(block.hash)
    frontier = [block.hash]
    while frontier:
        parent_hash = frontier.pop(0)
        waiting = [h for h, b in store.orphans.items() if b.header.previous_hash == parent_hash]
        for h in waiting:
            orphan = store.orphans.pop(h)
            try:
                store._store(orphan)
            except InvalidBlock as exc:
                report.rejected.append((h, exc.verdict))
                continue
            report.stored.append(h)
            frontier.append(h)

    best = max((store.blocks[h] for h in report.stored), key=_fork_key)
    if _fork_key(best) > _fork_key(store.blocks[old_tip]):
        store.tip = best.hash
        report.rolled_back, report.applied = store._path_diff(old_tip, best.hash)
        report.tip_changed = True
        report.new_tip = best.hash
    return report


def select_fork(store: ChainStore) -> Hash32:
    """Head of the longest stored chain; ties go to the smaller tip hash."""
    return max(store.blocks.values(), key=_fork_key).hash


# ---------------------------------------------------------------------------
# Dumps and audits
# ---------------------------------------------------------------------------


def chain_dump_lines(blocks: Iterable[Block]) -> str:
    return "".join(json.dumps(b.to_json(), sort_keys=True) + "\n" for b in blocks)


@dataclass(frozen=True)
class AuditFinding:
    position: int
    block_hash: str
    reason: str

    def __str__(self) -> str:
        return f"block #{self.position} ({self.block_hash[:16]}): {self.reason}"


def replay_states(blocks: Sequence[Block], registry: Mapping, params: ConsensusParams) -> List[LedgerState]:
    """Ledger after each block, folded from genesis. Raises InvalidBlock."""
    states = []
    state = genesis_ledger(registry, params.initial_balance)
    parent = None
    for block in blocks:
        state, _ = apply_block(block, parent, state, registry, params)
        states.append(state)
        parent = block
    return states


def audit_chain(
    raw_blocks: Sequence[bytes],
    registry: Mapping,
    params: ConsensusParams,
    expected_tip: Optional[bytes] = None,
) -> List[AuditFinding]:
    """Decode and re-validate a serialized chain from genesis.

    Returns findings in chain order; an empty list means the chain is intact.
    ``expected_tip`` anchors the head, whose header has no descendant to
    vouch for it.
    """
    findings = []
    state = genesis_ledger(registry, params.initial_balance)
    parent: Optional[Block] = None
    for position, raw in enumerate(raw_blocks):
        try:
            block = Block.from_bytes(raw)
        except (DecodeError, ValueError) as exc:
            findings.append(AuditFinding(position, "?" * 64, f"undecodable: {exc}"))
            return findings
        try:
            state, _ = apply_block(block, parent, state, registry, params)
        except InvalidBlock as exc:
            findings.append(AuditFinding(position, block.hash.hex(), str(exc.verdict)))
            return findings
        parent = block
    if expected_tip is not None and (parent is None or parent.hash != expected_tip):
        got = parent.hash.hex() if parent else "none"
        findings.append(AuditFinding(len(raw_blocks) - 1, got, "tip does not match anchored hash"))
    return findings
