"""Run orchestration: simulate a scenario, persist it to the cloud store, audit it."""

from __future__ import annotations

import json
import shutil
import tempfile
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple

from .blocks import Block, DataSharePayload
from .chain import ConsensusParams, InvalidBlock, audit_chain, chain_dump_lines, replay_states
from .cloud import CloudStore, LedgerSnapshot, RecordKind, read_frames, decode_record
from .crypto import Hash32
from .encoding import DecodeError
from .ledger import Registry, leader, ledger_json
from .scenarios import Scenario
from .vanet import EventLog, SimConfig, World

MANIFEST = "manifest.json"


class AuditFailed(RuntimeError):
    def __init__(self, summary: "RunSummary"):
        failed = [name for name, ok in summary.invariants.items() if not ok]
        super().__init__("audit failed: " + ", ".join(failed))
        self.summary = summary


@dataclass
class RunSummary:
    scenario: str
    seed: int
    run_dir: str
    final_tip: str
    chain_length: int
    balances: Dict[str, int]
    leader: str
    leader_label: str
    accepted_messages: int
    rejected_messages: Dict[str, int]
    invariants: Dict[str, bool] = field(default_factory=dict)
    findings: List[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(self.invariants.values())

    def to_json(self) -> dict:
        return asdict(self)

    def table(self) -> str:
        rows = [
            ("scenario", self.scenario),
            ("seed", str(self.seed)),
            ("final tip", self.final_tip[:16]),
            ("chain length", str(self.chain_length)),
            ("leader", f"{self.leader_label} ({self.leader[:12]})"),
            ("messages accepted", str(self.accepted_messages)),
            ("messages rejected", ", ".join(f"{k}={v}" for k, v in sorted(self.rejected_messages.items())) or "0"),
        ]
        rows += [(f"balance {label}", str(bal)) for label, bal in self.balances.items()]
        rows += [(f"check {name}", "pass" if ok else "FAIL") for name, ok in self.invariants.items()]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k.ljust(width)}  {v}" for k, v in rows)


def build_world(scenario: Scenario, config: SimConfig) -> Tuple[World, SimConfig]:
    config = scenario.configure(config)
    scenario.validate(config)
    world = World(config, scenario.vehicles, scenario.rsu_position)
    for adv in scenario.adversaries:
        world.inject_adversary(adv.behavior, adv.label, adv.position)
    for e in scenario.emissions:
        world.schedule_emission(e.tick, e.sender, e.kind)
    for p in scenario.partitions:
        world.schedule_partition(p.start, p.end, p.groups)
    return world, config


# ---------------------------------------------------------------------------
# Event-log invariants
# ---------------------------------------------------------------------------


def duplicate_accepts(log: EventLog) -> int:
    counts = Counter((e.node, e.digest) for e in log.of_kind("msg_accept"))
    return sum(c - 1 for c in counts.values() if c > 1)


def forged_accepts(log: EventLog) -> int:
    forged = {e.digest for e in log.of_kind("msg_forge")}
    return sum(1 for e in log.of_kind("msg_accept") if e.digest in forged)


def tampered_adoptions(log: EventLog, honest: set) -> int:
    forged = {e.digest for e in log.of_kind("block_forge")}
    return sum(1 for e in log.of_kind("block_store") if e.node in honest and e.digest in forged)


def unacknowledged_benefiters(log: EventLog, chain: List[Block], registry: Registry) -> List[str]:
    accepted = {(e.node, e.digest) for e in log.of_kind("msg_accept")}
    missing = []
    for block in chain[1:]:
        for tx in block.transactions:
            if isinstance(tx.payload, DataSharePayload):
                for b in tx.payload.benefiters:
                    if (registry.label(b), tx.payload.message_digest.hex()) not in accepted:
                        missing.append(f"{registry.label(b)}:{tx.payload.message_digest.hex()[:12]}")
    return missing


# ---------------------------------------------------------------------------
# Persistence and audit
# ---------------------------------------------------------------------------


def persist(world: World, config: SimConfig, scenario: Scenario, run_dir: Path) -> None:
    ref = world.reference_node()
    chain = ref.store.best_chain()
    with CloudStore(run_dir) as store:
        for block in chain:
            store.append(block)
            store.append(LedgerSnapshot(block.height, block.header.timestamp_ms, block.hash, ref.store.states[block.hash]))
        for msg in sorted(world.messages.values(), key=lambda m: (m.tick, bytes(m.digest))):
            store.append(msg)
        for verdict in world.verdicts:
            store.append(verdict)
    manifest = {
        "scenario": scenario.name,
        "config": config.to_json(),
        "registry": world.registry.to_json(),
        "reference_node": ref.label,
        "tip": ref.store.tip.hex(),
        "honest_nodes": [n.label for n in world.honest_full_nodes],
        "nodes": {v.label: v.ivtp_id.hex() for v in world.vehicles},
    }
    (run_dir / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    (run_dir / "events.jsonl").write_text(world.log.to_jsonl())
    (run_dir / "chain.jsonl").write_text(chain_dump_lines(chain))
    (run_dir / "ledger.json").write_text(ledger_json(ref.store.ledger))


def load_manifest(run_dir) -> dict:
    return json.loads((Path(run_dir) / MANIFEST).read_text())


def audit_run(run_dir) -> List[str]:
    """Re-validate every stored block and snapshot. Reads only; never writes."""
    run_dir = Path(run_dir)
    try:
        manifest = load_manifest(run_dir)
    except (OSError, ValueError) as exc:
        return [f"manifest unreadable: {exc}"]
    registry = Registry.from_json(manifest["registry"])
    config = SimConfig.from_mapping(manifest["config"])
    params = config.consensus
    findings: List[str] = []

    raw_blocks: List[bytes] = []
    try:
        data = (run_dir / "blocks.log").read_bytes()
        for _rid, kind, start, length in read_frames(run_dir / "blocks.log"):
            if kind is not RecordKind.BLOCK:
                findings.append(f"blocks.log: record #{len(raw_blocks)} is not a block")
                break
            raw_blocks.append(data[start:start + length])
    except (OSError, DecodeError) as exc:
        findings.append(f"blocks.log: {exc}")
    findings += [str(f) for f in audit_chain(raw_blocks, registry, params, Hash32.from_hex(manifest["tip"]))]

    expected_supply = len(registry) * params.initial_balance
    try:
        data = (run_dir / "snapshots.log").read_bytes()
        snapshots = [
            decode_record(kind, data[s:s + n])
            for _rid, kind, s, n in read_frames(run_dir / "snapshots.log")
            if kind is RecordKind.SNAPSHOT
        ]
    except (OSError, DecodeError, ValueError) as exc:
        findings.append(f"snapshots.log: {exc}")
        snapshots = []
    for snap in snapshots:
        if snap.state.supply != expected_supply:
            findings.append(f"snapshot at height {snap.height}: supply {snap.state.supply} != {expected_supply}")
    if not findings:
        states = replay_states([Block.from_bytes(r) for r in raw_blocks], registry, params)
        if len(states) != len(snapshots):
            findings.append(f"{len(snapshots)} snapshots for {len(states)} blocks")
        for snap, state in zip(snapshots, states):
            if snap.state.to_bytes() != state.to_bytes():
                findings.append(f"snapshot at height {snap.height} differs from genesis replay")
    try:
        data = (run_dir / "messages.log").read_bytes()
        for _rid, kind, s, n in read_frames(run_dir / "messages.log"):
            decode_record(kind, data[s:s + n])
    except FileNotFoundError:
        pass
    except (OSError, ValueError) as exc:
        findings.append(f"messages.log: {exc}")
    return findings


def run(
    scenario: Scenario,
    config: SimConfig,
    out_dir=None,
    *,
    retention: str = "keep",
) -> RunSummary:
    """Simulate, persist, and audit one run.

    Writes ``<out_dir>/runs/<run-id>/``. Raises AuditFailed, carrying the
    summary, if any invariant check fails.
    """
    if retention not in ("keep", "purge"):
        raise ValueError("retention must be 'keep' or 'purge'")
    world, config = build_world(scenario, config)
    world.run()

    scratch = None
    if out_dir is None:
        scratch = Path(tempfile.mkdtemp(prefix="ivchain-"))
        out_dir = scratch
    run_dir = Path(out_dir) / "runs" / f"{scenario.name}-seed{config.seed}"
    if run_dir.exists():
        if not (run_dir / MANIFEST).exists():
            raise FileExistsError(f"{run_dir} exists and is not a run directory")
        shutil.rmtree(run_dir)
    run_dir.mkdir(parents=True)
    try:
        persist(world, config, scenario, run_dir)
        summary = summarize(world, config, scenario, run_dir)
        (run_dir / "summary.json").write_text(json.dumps(summary.to_json(), indent=2, sort_keys=True) + "\n")
    finally:
        if retention == "purge" or scratch is not None:
            shutil.rmtree(scratch or run_dir, ignore_errors=True)
    if not summary.ok:
        raise AuditFailed(summary)
    return summary


def summarize(world: World, config: SimConfig, scenario: Scenario, run_dir: Path) -> RunSummary:
    ref = world.reference_node()
    chain = ref.store.best_chain()
    final = ref.store.ledger
    registry = world.registry
    honest = world.honest_full_nodes
    honest_labels = {n.label for n in honest}
    params: ConsensusParams = config.consensus
    supply = len(registry) * params.initial_balance

    findings = audit_run(run_dir)
    checks: Dict[str, bool] = {"stored_chain_valid": not findings}
    checks["supply_conserved"] = all(ref.store.states[b.hash].supply == supply for b in chain)
    checks["tips_agree"] = len({n.store.tip for n in honest}) == 1
    try:
        replay_ok = all(
            replay_states(n.store.best_chain(), registry, params)[-1].to_bytes() == n.store.ledger.to_bytes()
            for n in honest
        )
    except InvalidBlock:
        replay_ok = False
    checks["honest_tips_replay_from_genesis"] = replay_ok
    checks["no_duplicate_accepts"] = duplicate_accepts(world.log) == 0
    checks["no_forged_accepts"] = forged_accepts(world.log) == 0
    checks["no_tampered_blocks_adopted"] = tampered_adoptions(world.log, honest_labels) == 0
    missing = unacknowledged_benefiters(world.log, chain, registry)
    checks["benefiters_acknowledged"] = not missing
    findings += [f"benefiter without accept verdict: {m}" for m in missing]

    top = leader(final)
    checks["leader_matches_ledger"] = final.balances[top] == max(final.balances.values())

    accepted = len(world.log.of_kind("msg_accept"))
    rejected = Counter(e.kind.split(":", 1)[1] for e in world.log if e.kind.startswith("msg_reject:"))
    return RunSummary(
        scenario=scenario.name,
        seed=config.seed,
        run_dir=str(run_dir),
        final_tip=ref.store.tip.hex(),
        chain_length=ref.store.tip_block.height,
        balances={registry.label(v): final.balances[v] for v in registry},
        leader=top.hex(),
        leader_label=registry.label(top),
        accepted_messages=accepted,
        rejected_messages=dict(sorted(rejected.items())),
        invariants=checks,
        findings=findings,
    )


def export_run(run_dir, dest=None) -> List[Path]:
    """Write JSON-lines views of every stored record kind."""
    run_dir = Path(run_dir)
    dest = Path(dest) if dest else run_dir / "export"
    dest.mkdir(parents=True, exist_ok=True)
    store = CloudStore(run_dir)
    names = {
        RecordKind.BLOCK: "blocks.jsonl",
        RecordKind.MESSAGE: "messages.jsonl",
        RecordKind.VERDICT: "verdicts.jsonl",
        RecordKind.SNAPSHOT: "snapshots.jsonl",
    }
    lines: Dict[RecordKind, List[str]] = {k: [] for k in names}
    for rid, record in store.records():
        kind = store.kind_of(rid)
        if kind is RecordKind.SNAPSHOT:
            view = {"height": record.height, "tick": record.tick, "block_hash": record.block_hash.hex(), **record.state.to_json()}
        else:
            view = record.to_json()
        lines[kind].append(json.dumps({"record_id": rid, **view}, sort_keys=True))
    written = []
    for kind, name in names.items():
        path = dest / name
        path.write_text("".join(line + "\n" for line in lines[kind]))
        written.append(path)
    return written
