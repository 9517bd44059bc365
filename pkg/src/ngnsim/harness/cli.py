"""``ngnsim run | validate | report``."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from .runner import IoError, run_scenario
from .scenario import ParseError, ValidationErrors, parse_scenario

DEFAULT_OUT = "ngnsim-out"


def _load(path: str):
    try:
        return parse_scenario(path), None
    except FileNotFoundError:
        return None, [f"{path}: no such file"]
    except ParseError as exc:
        return None, [f"{path}: {exc}"]
    except ValidationErrors as exc:
        return None, [f"{path}: {issue}" for issue in exc.issues]


def cmd_run(args: argparse.Namespace) -> int:
    scenario, errors = _load(args.scenario)
    if errors:
        print("\n".join(errors), file=sys.stderr)
        return 2
    out = args.out or os.environ.get("NGNSIM_OUT") or DEFAULT_OUT
    try:
        report = run_scenario(scenario, out, seed=args.seed)
    except IoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    states: dict[str, int] = {}
    for s in report.sessions:
        states[s.state.value] = states.get(s.state.value, 0) + 1
    summary = ", ".join(f"{n} {k}" for k, n in sorted(states.items())) or "no sessions"
    print(f"{scenario.name}: seed {report.seed}, {summary}; reports in {out}")
    return 0


def cmd_validate(args: argparse.Namespace) -> int:
    scenario, errors = _load(args.scenario)
    if errors:
        print("\n".join(errors))
        return 1
    for warning in scenario.warnings:
        print(f"warning: {warning}")
    counts = ", ".join(f"{v} {k}" for k, v in scenario.counts().items())
    print(f"OK {scenario.name}: {counts}")
    return 0


def _fmt(value) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.3f}"
    return str(value)


def cmd_report(args: argparse.Namespace) -> int:
    path = Path(args.out_dir) / "sessions.json"
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: cannot read {path}: {exc}", file=sys.stderr)
        return 1
    sessions = doc.get("sessions", [])
    if args.session:
        sessions = [s for s in sessions if s["session_id"] == args.session]
        if not sessions:
            print(f"error: no session {args.session}", file=sys.stderr)
            return 1
    print(f"scenario {doc.get('scenario')} seed {doc.get('seed')}")
    for s in sessions:
        q = s.get("qoe") or {}
        line = (
            f"{s['session_id']:<12} {s['service']:<12} {s['mode']:<10} {s['state']:<10} "
            f"point={_fmt(s['chosen_point'])} mos={_fmt(q.get('mos'))}"
        )
        if q:
            line += (
                f" degraded={q['degraded_seconds']} errored={q['errored_seconds']}"
                f" unavailable={q['unavailable_seconds']}/{q['total_seconds']}"
            )
        if s["state"] == "rejected":
            line += f" stage={s['reject_stage']} reason={s['reason']}"
        print(line)
        if args.session:
            for fid in s.get("flows", []):
                f = doc["flows"][fid]
                print(
                    f"  {fid}: sent={f['sent']} delivered={f['delivered']} dropped={f['dropped']} "
                    f"loss={_fmt(f['loss'])} delay_ms={_fmt(f['mean_delay_ms'])} jitter_ms={_fmt(f['jitter_ms'])}"
                )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ngnsim", description="NGN quality assurance simulator")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="run a scenario and write reports")
    p.add_argument("scenario")
    p.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    p.add_argument("--out", default=None, help="output directory (default $NGNSIM_OUT or ./ngnsim-out)")
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("validate", help="parse and check a scenario without running it")
    p.add_argument("scenario")
    p.set_defaults(func=cmd_validate)
    p = sub.add_parser("report", help="summarize the reports of a finished run")
    p.add_argument("out_dir")
    p.add_argument("--session", default=None)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
