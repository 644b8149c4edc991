"""Command line entry point ``ppde``."""
from __future__ import annotations

import argparse
import sys

from .runner import EXIT_SCHEMA, replay, run_scenario

SUBCOMMANDS = ("simulate", "solve", "verify", "stop", "control", "all")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ppde", description="Path-dependent PDE laboratory")
    sub = p.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        s = sub.add_parser(name, help=f"run the {name} stage" if name != "all" else "run every stage present")
        s.add_argument("--config", required=True, help="scenario JSON file or bundled scenario name")
        s.add_argument("--out", required=True, help="output directory")
        s.add_argument("--seed", type=int, default=None)
        s.add_argument("--workers", type=int, default=None)
    r = sub.add_parser("replay", help="re-run a report directory and compare")
    r.add_argument("dir")
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--workers", type=int, default=None)
    sub.add_parser("list", help="list bundled scenarios")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.command == "list":
        from .scenario import bundled_names
        print("\n".join(bundled_names()))
        return 0
    if args.command == "replay":
        code, diffs = replay(args.dir, workers=args.workers, seed=args.seed)
        if code == 0:
            print("replay: identical")
        else:
            for d in diffs:
                print(f"replay mismatch: {d}", file=sys.stderr)
        return code
    code, report = run_scenario(args.config, args.command, args.out, args.seed, args.workers)
    if code == EXIT_SCHEMA:
        print(f"schema error: {report['message']}", file=sys.stderr)
        return code
    for c in report.get("checks", []):
        if "value" not in c:
            val = ""
        elif "stderr" in c:
            val = f" {c['value']:.6g} ± {c['stderr']:.2g}"
        else:
            val = f" {c['value']:.6g} (exact)"
        print(f"{'PASS' if c['passed'] else 'FAIL'} {c['name']}{val}")
    if "error" in report:
        print(f"numerical failure: {report['error']['message']}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
