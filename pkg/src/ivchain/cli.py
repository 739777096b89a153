"""Command-line entry point.

Exit status: 0 success, 1 audit failure, 2 usage error, 3 access denied.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional

from .cloud import AccessDenied, AccessRole, CloudStore, Role, query_history, reputation_report
from .crypto import Hash32
from .runner import AuditFailed, audit_run, export_run, load_manifest, run
from .scenarios import BUILTINS, ScenarioInvalid, load_scenario
from .vanet import SimConfig

EXIT_OK, EXIT_AUDIT, EXIT_USAGE, EXIT_DENIED = 0, 1, 2, 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ivchain", description="Blockchain-backed intelligent-vehicle data sharing simulator")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="simulate a scenario and persist it")
    r.add_argument("--scenario", required=True, help=f"builtin ({', '.join(BUILTINS)}) or TOML file")
    r.add_argument("--config", type=Path, help="TOML file with SimConfig keys")
    r.add_argument("--seed", type=int)
    r.add_argument("--out", type=Path, default=Path("."))
    r.add_argument("--retention", choices=("keep", "purge"), default="keep")
    r.add_argument("--json", action="store_true", help="print only the JSON summary")

    e = sub.add_parser("export", help="write JSON views of a run's records")
    e.add_argument("--run", type=Path, required=True)
    e.add_argument("--format", choices=("json",), default="json")
    e.add_argument("--dest", type=Path)

    for name, help_text in (("query", "role-gated history query"), ("report", "reputation report")):
        q = sub.add_parser(name, help=help_text)
        q.add_argument("--run", type=Path, required=True)
        q.add_argument("--role", required=True, choices=[r.value for r in Role])
        q.add_argument("--vehicle", required=True, help="hex ivtp id or vehicle label")
        q.add_argument("--owner", help="ivtp id the Owner role speaks for (default: --vehicle)")
        if name == "query":
            q.add_argument("--from", dest="tick_from", type=int)
            q.add_argument("--to", dest="tick_to", type=int)
            q.add_argument("--kind", action="append", dest="kinds", help="restrict to a record kind (repeatable)")

    a = sub.add_parser("audit", help="re-validate every stored block and the supply invariant")
    a.add_argument("--run", type=Path, required=True)
    return p


def _resolve_vehicle(run_dir: Path, text: str) -> Hash32:
    nodes = load_manifest(run_dir).get("nodes", {})
    if text in nodes:
        return Hash32.from_hex(nodes[text])
    return Hash32.from_hex(text)


def _role(args, vehicle: Hash32) -> AccessRole:
    role = Role(args.role)
    owner = None
    if role is Role.OWNER:
        owner = _resolve_vehicle(args.run, args.owner) if args.owner else vehicle
    return AccessRole(role, owner)


def _cmd_run(args) -> int:
    config = SimConfig.from_file(args.config) if args.config else SimConfig()
    if args.seed is not None:
        config = SimConfig.from_mapping({"seed": args.seed}, config)
    scenario = load_scenario(args.scenario, config)
    try:
        summary = run(scenario, config, args.out, retention=args.retention)
        status = EXIT_OK
    except AuditFailed as exc:
        summary = exc.summary
        status = EXIT_AUDIT
    if not args.json:
        print(summary.table())
        for finding in summary.findings:
            print(f"finding: {finding}")
        print()
    print(json.dumps(summary.to_json(), sort_keys=True))
    return status


def _cmd_export(args) -> int:
    for path in export_run(args.run, args.dest):
        print(path)
    return EXIT_OK


def _cmd_query(args) -> int:
    vehicle = _resolve_vehicle(args.run, args.vehicle)
    store = CloudStore(args.run)
    records = query_history(store, _role(args, vehicle), vehicle, args.tick_from, args.tick_to, args.kinds)
    for rec in records:
        print(json.dumps(rec.to_json(), sort_keys=True))
    return EXIT_OK


def _cmd_report(args) -> int:
    vehicle = _resolve_vehicle(args.run, args.vehicle)
    store = CloudStore(args.run)
    print(json.dumps(reputation_report(store, _role(args, vehicle), vehicle).to_json(), sort_keys=True))
    return EXIT_OK


def _cmd_audit(args) -> int:
    findings = audit_run(args.run)
    for finding in findings:
        print(f"FAIL {finding}")
    if findings:
        return EXIT_AUDIT
    print(f"OK {args.run}")
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    handler = {
        "run": _cmd_run,
        "export": _cmd_export,
        "query": _cmd_query,
        "report": _cmd_report,
        "audit": _cmd_audit,
    }[args.command]
    try:
        return handler(args)
    except AccessDenied as exc:
        print(f"access denied: {exc}", file=sys.stderr)
        return EXIT_DENIED
    except (ScenarioInvalid, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
