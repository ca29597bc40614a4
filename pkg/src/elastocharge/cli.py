"""Command-line front end.

    simulate <scenario.toml> [--out DIR] [--mode MODE] [--override key=value]...
    simulate --report DIR

Runs write ledger.csv, snapshots/step_*.json, diag.json, trajectory.csv (when
probes are configured) and, unless disabled, rendered figures next to the
CSV.  --report regenerates the figures from an existing run directory.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path


def build_parser():
    p = argparse.ArgumentParser(
        prog="simulate",
        description="Galerkin simulation of charged elastic/poroelastic bodies")
    p.add_argument("scenario", nargs="?", help="scenario TOML file")
    p.add_argument("--out", default=None, help="output directory (default: runs/<name>)")
    p.add_argument("--mode", default=None,
                   choices=["dynamic", "static", "diffusion", "audit", "study"],
                   help="override the scenario's mode")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="override a scenario field, e.g. time.dt=5e-4")
    p.add_argument("--report", default=None, metavar="DIR",
                   help="re-render figures for an existing run directory and exit")
    p.add_argument("--no-figures", action="store_true",
                   help="skip figure rendering")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.report:
        from .report import render_run
        figdir = render_run(args.report)
        print(f"figures written to {figdir}")
        return 0
    if not args.scenario:
        build_parser().error("a scenario file is required (or use --report DIR)")
    overrides = {}
    for item in args.override:
        if "=" not in item:
            print(f"bad --override {item!r}: expected key=value", file=sys.stderr)
            return 2
        key, val = item.split("=", 1)
        overrides[key.strip()] = val.strip()
    out = args.out or str(Path("runs") / Path(args.scenario).stem)
    from .runner import run_path
    from .scenario import ScenarioError
    try:
        result = run_path(args.scenario, out, overrides=overrides,
                          mode=args.mode, figures=False if args.no_figures else None)
    except ScenarioError as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return 2
    status = result.get("status", "ok")
    print(f"mode={result.get('mode')} status={status} out={out}")
    if status != "ok":
        print(result.get("error", ""), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
