"""Acceptance criteria. Each test carries a ``criterion`` marker; the conftest
prints one PASS/FAIL line per criterion at the end of the session.

Expected values come from the independent oracles in ``oracles.py`` or from
brute-force folds over the JSON artifacts, never from the code under test.
"""

import json
import os
import random
import subprocess
import sys
import time
from pathlib import Path

import pytest

import oracles
from helpers import Fleet
from ivchain.chain import ChainStore, audit_chain, extend, replay_states, select_fork
from ivchain.cloud import (
    ALL_KINDS,
    AccessDenied,
    AccessRole,
    CloudStore,
    Role,
    SCOPES,
    query_history,
    reputation_report,
)
from ivchain.crypto import Hash32, MerkleTree, double_sha256, merkle_proof, verify_merkle_proof
from ivchain.pod import effective_difficulty
from ivchain.runner import build_world, duplicate_accepts, export_run, forged_accepts, run, tampered_adoptions
from ivchain.scenarios import BUILTINS, load_scenario
from ivchain.vanet import SimConfig


def flips(data):
    """Every single-bit mutation of ``data``."""
    for i in range(len(data)):
        for bit in range(8):
            out = bytearray(data)
            out[i] ^= 1 << bit
            yield bytes(out)


def simulate(name, **cfg):
    config = SimConfig(**cfg)
    world, _ = build_world(load_scenario(name, config), config)
    return world


# -- 1 ------------------------------------------------------------------------


@pytest.mark.criterion(1, "double SHA-256 matches a hand-written reference on 50 vectors")
def test_hash_conformance():
    rng = random.Random(1)
    corpus = [b"", b"abc", rng.randbytes(1 << 20)]
    # lengths around the 55/56/64-byte padding boundaries, then random sizes
    corpus += [rng.randbytes(n) for n in (1, 55, 56, 57, 63, 64, 65, 119, 120, 127, 128, 129)]
    corpus += [rng.randbytes(rng.randrange(0, 4096)) for _ in range(50 - len(corpus))]
    assert len(corpus) == 50
    expected = [oracles.sha256(oracles.sha256(v)) for v in corpus]

    start = time.perf_counter()
    got = [double_sha256(v) for v in corpus]
    elapsed = time.perf_counter() - start

    assert got == expected
    assert expected[1].hex() == "4f8b42c22dd3729b519ba6f68d2da7cc5b2d606d05daed5ad5128cc03e6c6358"
    assert elapsed < 1.0, f"{elapsed:.3f} s"


# -- 2 ------------------------------------------------------------------------


@pytest.mark.criterion(2, "Merkle proofs: honest ones verify, every single-bit mutation fails")
def test_merkle_soundness_and_completeness():
    rng = random.Random(2)
    start = time.perf_counter()
    checked = 0
    for trial in range(100):
        n = 1 + trial % 16
        payloads = [rng.randbytes(rng.randrange(1, 80)) for _ in range(n)]
        tree = MerkleTree.from_payloads(payloads)
        assert tree.root == oracles.merkle_root(payloads)
        for i in range(n):
            assert verify_merkle_proof(tree.leaves[i], merkle_proof(tree, i), tree.root)
        # exhaustive mutations on one leaf per trial keeps the run inside budget
        i = rng.randrange(n)
        leaf, proof, root = tree.leaves[i], merkle_proof(tree, i), tree.root
        for bad in flips(leaf):
            assert not verify_merkle_proof(bad, proof, root)
        for bad in flips(root):
            assert not verify_merkle_proof(leaf, proof, bad)
        for step, (sibling, side) in enumerate(proof):
            for bad in flips(sibling):
                mutated = proof[:step] + [(Hash32(bad), side)] + proof[step + 1:]
                assert not verify_merkle_proof(leaf, mutated, root)
                checked += 1
    elapsed = time.perf_counter() - start
    assert checked > 0
    assert elapsed < 5.0, f"{elapsed:.3f} s"


# -- 3 ------------------------------------------------------------------------


def twenty_block_chain(seed=3):
    rng = random.Random(seed)
    f = Fleet(n=4, seed=seed)
    for _ in range(20):
        txs = []
        for _ in range(rng.randint(1, 3)):
            sender = rng.randrange(4)
            others = [j for j in range(4) if j != sender]
            txs.append(f.share(sender, rng.sample(others, rng.randint(0, 3)), tag=rng.randbytes(4)))
        f.grow(rng.randrange(4), txs, distance_m=rng.randrange(0, 6000))
    return f


@pytest.mark.criterion(3, "200 random single-byte mutations of a 20-block chain are all detected")
def test_tamper_evidence():
    f = twenty_block_chain()
    raws = [b.to_bytes() for b in f.blocks]
    tip = f.blocks[-1].hash
    assert len(f.blocks) == 21
    assert audit_chain(raws, f.registry, f.params, tip) == []

    rng = random.Random(33)
    start = time.perf_counter()
    missed = []
    for _ in range(200):
        which = rng.randrange(len(raws))
        pos = rng.randrange(len(raws[which]))
        mutated = bytearray(raws[which])
        mutated[pos] ^= rng.randrange(1, 256)
        chain = raws[:which] + [bytes(mutated)] + raws[which + 1:]
        if not audit_chain(chain, f.registry, f.params, tip):
            missed.append((which, pos))
    elapsed = time.perf_counter() - start
    assert missed == []
    assert elapsed < 10.0, f"{elapsed:.3f} s"


# -- 4 ------------------------------------------------------------------------


@pytest.mark.criterion(4, "supply stays at 10 x initial balance over 100 random blocks")
def test_supply_conservation():
    rng = random.Random(4)
    start = time.perf_counter()
    f = Fleet(n=10, seed=4)
    expected = 10 * f.params.initial_balance
    for _ in range(100):
        txs = []
        for _ in range(rng.randint(1, 6)):
            sender = rng.randrange(10)
            others = [j for j in range(10) if j != sender]
            txs.append(f.share(sender, rng.sample(others, rng.randint(0, 5)), tag=rng.randbytes(4)))
        if rng.random() < 0.3:
            s, r = rng.sample(range(10), 2)
            if f.states[-1].balance(f[s].ivtp_id) > 0:
                txs.append(f.transfer(s, r, rng.randint(1, f.states[-1].balance(f[s].ivtp_id))))
        f.grow(rng.randrange(10), txs, distance_m=rng.randrange(0, 8000))
    elapsed = time.perf_counter() - start
    assert len(f.states) == 101
    for height, state in enumerate(f.states):
        assert sum(state.balances.values()) == expected, height
        assert all(v >= 0 for v in state.balances.values())
    # the balances actually moved
    assert len(set(f.states[-1].balances.values())) > 1
    assert elapsed < 30.0, f"{elapsed:.3f} s"


# -- 5 ------------------------------------------------------------------------

ARTIFACTS = ("events.jsonl", "chain.jsonl", "ledger.json", "blocks.log", "snapshots.log", "messages.log")


def cli_run(name, out, hash_seed):
    env = dict(os.environ, PYTHONHASHSEED=str(hash_seed))
    cmd = [sys.executable, "-m", "ivchain", "run", "--scenario", name, "--seed", "11", "--out", str(out), "--json"]
    proc = subprocess.run(cmd, env=env, capture_output=True, text=True, timeout=300)
    assert proc.returncode == 0, proc.stderr
    return out / "runs" / f"{name}-seed11"


@pytest.mark.criterion(5, "same seed, byte-identical event log, chain dump and ledger")
@pytest.mark.parametrize("name", sorted(BUILTINS))
def test_deterministic_replay(name, tmp_path):
    a = cli_run(name, tmp_path / "a", 1)
    b = cli_run(name, tmp_path / "b", 2)
    for artifact in ARTIFACTS:
        assert (a / artifact).read_bytes() == (b / artifact).read_bytes(), artifact
    assert (a / "events.jsonl").stat().st_size > 0


# -- 6 ------------------------------------------------------------------------

CONVERGE_TICKS = 100


def last_seal_lag(world):
    honest = {n.label for n in world.honest_full_nodes}
    last_seal = max(e.tick for e in world.log.of_kind("block_seal"))
    last_tip = max(e.tick for e in world.log.of_kind("tip") if e.node in honest)
    return last_tip - last_seal


@pytest.mark.criterion(6, "10 nodes agree on one tip within 100 ticks; partitions heal to the fork-choice winner")
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_convergence_after_last_seal(seed):
    world = simulate("convoy", seed=seed, node_count=10, drop_probability=0.2, base_difficulty=8, duration_ticks=20_000)
    world.run()
    assert len(world.honest_full_nodes) == 10
    assert len({n.store.tip for n in world.honest_full_nodes}) == 1
    assert world.reference_node().store.tip_block.height > 10
    assert last_seal_lag(world) <= CONVERGE_TICKS


@pytest.mark.criterion(6, "10 nodes agree on one tip within 100 ticks; partitions heal to the fork-choice winner")
@pytest.mark.parametrize("seed", [0, 1])
def test_partition_heals_to_fork_choice_winner(seed):
    config = SimConfig(seed=seed, node_count=10, drop_probability=0.2, base_difficulty=8, duration_ticks=10_000)
    scenario = load_scenario("partition-heal", config)
    world, config = build_world(scenario, config)
    heal = scenario.partitions[0].end
    honest = world.honest_full_nodes

    world.step(heal - 1)
    assert len({n.store.tip for n in honest}) >= 2, "the partition never forked the chain"
    world.run()

    assert [e for e in world.log.of_kind("reorg") if e.tick >= heal]
    tips = {n.store.tip for n in honest}
    assert len(tips) == 1
    union = ChainStore(world.registry, config.consensus)
    for block in sorted({b for n in honest for b in n.store.blocks.values()}, key=lambda b: b.height):
        if block.height and block.hash not in union:
            extend(union, block)
    assert select_fork(union) == tips.pop()
    assert last_seal_lag(world) <= CONVERGE_TICKS
    for node in honest:
        replayed = replay_states(node.store.best_chain(), world.registry, config.consensus)[-1]
        assert replayed.to_bytes() == node.store.ledger.to_bytes()


# -- 7 ------------------------------------------------------------------------


@pytest.mark.criterion(7, "adversaries: zero duplicate, forged or tampered acceptances")
@pytest.mark.parametrize("seed,nodes,drop", [(0, 5, 0.0), (1, 5, 0.1), (2, 10, 0.2)])
def test_adversary_suite(seed, nodes, drop):
    world = simulate("adversary-mix", seed=seed, node_count=nodes, drop_probability=drop)
    world.run()
    log = world.log
    # the attacks really happened
    assert log.of_kind("msg_replay") and log.of_kind("msg_forge") and log.of_kind("block_forge")
    honest = {n.label for n in world.honest_full_nodes}
    assert duplicate_accepts(log) == 0
    assert forged_accepts(log) == 0
    assert tampered_adoptions(log, honest) == 0
    for node in world.honest_full_nodes:
        raws = [b.to_bytes() for b in node.store.best_chain()]
        assert audit_chain(raws, world.registry, world.config.consensus, node.store.tip) == []


# -- 8 ------------------------------------------------------------------------


@pytest.mark.criterion(8, "every driver seals within 200 rounds; difficulty formula exact on 1000 points")
def test_pod_liveness_and_fairness():
    world = simulate("convoy", seed=8, node_count=5, base_difficulty=8, duration_ticks=20_000)
    world.run()
    chain = world.reference_node().store.best_chain()
    sealers = {b.header.sealer_ivtp_id for b in chain[1:]}
    assert {v.ivtp_id for v in world.vehicles} <= sealers


@pytest.mark.criterion(8, "every driver seals within 200 rounds; difficulty formula exact on 1000 points")
def test_effective_difficulty_grid():
    rng = random.Random(8)
    meters = [0, 1, 999, 1000, 1001, 2999, 3000, 7000, 7999, 15_000, 10**9]
    meters += [rng.randrange(0, 300_000) for _ in range(50 - len(meters))]
    grid = [(base, m, unit) for base in range(1, 11) for m in meters for unit in (1000, 250)]
    assert len(grid) == 1000
    for base, m, unit in grid:
        assert effective_difficulty(base, m, unit_m=unit) == oracles.effective_difficulty(base, m, unit), (base, m, unit)


# -- 9 ------------------------------------------------------------------------


def jsonl(path):
    return [json.loads(line) for line in Path(path).read_text().splitlines()]


def fold_history(run_dir, export, vehicle, kinds):
    """Brute-force query result built from the chain dump and the export files."""
    chain = jsonl(run_dir / "chain.jsonl")
    block_ids = {b["hash"]: b["record_id"] for b in jsonl(export / "blocks.jsonl")}
    on_chain, off_chain = [], []
    for block in chain:
        tick, height = block["timestamp_ms"], block["height"]
        involved = [block["sealer"]]
        for tx in block["transactions"]:
            involved += [tx["sender"], *tx.get("benefiters", []), *[tx[k] for k in ("from", "to") if k in tx]]
        if vehicle not in involved:
            continue
        rid = block_ids[block["hash"]]
        if "header" in kinds:
            header = {k: v for k, v in block.items() if k != "transactions"}
            on_chain.append(((height, 0, -1), dict(kind="header", record_id=rid, height=height, index=-1, tick=tick, data=header)))
        if "transaction" in kinds:
            for i, tx in enumerate(block["transactions"]):
                if vehicle in (tx["sender"], *tx.get("benefiters", []), tx.get("from"), tx.get("to")):
                    on_chain.append(((height, 1, i), dict(kind="transaction", record_id=rid, height=height, index=i, tick=tick, data=tx)))
    if "snapshot" in kinds:
        for s in jsonl(export / "snapshots.jsonl"):
            data = {"balance": s["balances"][vehicle], "block_hash": s["block_hash"]}
            on_chain.append(((s["height"], 2, 0), dict(kind="snapshot", record_id=s["record_id"], height=s["height"], index=None, tick=s["tick"], data=data)))
    if "message" in kinds:
        for m in jsonl(export / "messages.jsonl"):
            if m["sender"] == vehicle:
                rid = m.pop("record_id")
                off_chain.append(((m["tick"], rid), dict(kind="message", record_id=rid, height=None, index=None, tick=m["tick"], data=m)))
    if "verdict" in kinds:
        for v in jsonl(export / "verdicts.jsonl"):
            if vehicle in (v["sender"], v["receiver"]):
                rid = v.pop("record_id")
                off_chain.append(((v["tick"], rid), dict(kind="verdict", record_id=rid, height=None, index=None, tick=v["tick"], data=v)))
    on_chain.sort(key=lambda p: p[0])
    off_chain.sort(key=lambda p: p[0])
    return [r for _, r in on_chain] + [r for _, r in off_chain]


def fold_reputation(run_dir, export, vehicle):
    chain = jsonl(run_dir / "chain.jsonl")
    snaps = jsonl(export / "snapshots.jsonl")
    shares = [tx for b in chain for tx in b["transactions"] if tx["kind"] == "DataShare"]
    return {
        "vehicle": vehicle,
        "balance": max(snaps, key=lambda s: s["height"])["balances"][vehicle],
        "blocks_sealed": sum(b["sealer"] == vehicle for b in chain),
        "messages_shared": sum(tx["sender"] == vehicle for tx in shares),
        "messages_benefited": sum(vehicle in tx["benefiters"] for tx in shares),
        "rejected_messages": sum(v["sender"] == vehicle and not v["accepted"] for v in jsonl(export / "verdicts.jsonl")),
    }


@pytest.mark.criterion(9, "cloud queries equal brute-force folds; out-of-scope queries are denied")
@pytest.mark.parametrize("name", sorted(BUILTINS))
def test_cloud_audit_equivalence(name, tmp_path):
    config = SimConfig(seed=9)
    summary = run(load_scenario(name, config), config, tmp_path)
    run_dir = Path(summary.run_dir)
    export = tmp_path / "export"
    export_run(run_dir, export)
    store = CloudStore(run_dir)
    vehicles = list(json.loads((run_dir / "manifest.json").read_text())["nodes"].values())
    assert vehicles

    for hexid in vehicles:
        vid = Hash32.from_hex(hexid)
        roles = [AccessRole(r) for r in Role if r is not Role.OWNER] + [AccessRole(Role.OWNER, vid)]
        for role in roles:
            got = [r.to_json() for r in query_history(store, role, vid)]
            assert got == fold_history(run_dir, export, hexid, SCOPES[role.role]), (hexid[:8], role.role)
            if Role.PUBLIC is not role.role:
                assert reputation_report(store, role, vid).to_json() == fold_reputation(run_dir, export, hexid)

        # every (role, kind) outside the scope table is refused
        for role in roles:
            for kind in ALL_KINDS:
                if kind not in SCOPES[role.role]:
                    with pytest.raises(AccessDenied):
                        query_history(store, role, vid, kinds=[kind])
        with pytest.raises(AccessDenied):
            reputation_report(store, AccessRole(Role.PUBLIC), vid)
        # an Owner speaking for another vehicle is refused for every kind
        for other in vehicles:
            if other != hexid:
                owner = AccessRole(Role.OWNER, Hash32.from_hex(other))
                for kind in ALL_KINDS:
                    with pytest.raises(AccessDenied):
                        query_history(store, owner, vid, kinds=[kind])
                with pytest.raises(AccessDenied):
                    reputation_report(store, owner, vid)
