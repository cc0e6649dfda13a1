"""Command-line entry point: ``bench run``, ``bench presets list`` and ``bench check``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Optional, Sequence

from .checks import run_suite
from .config import PRESET_NOTES, PRESETS, SCENARIOS, ConfigError, ScenarioConfig, preset
from .metrics import TIMELINE_HEADER, write_rows
from .scenarios import run


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bench", description="Connection-virtualization simulator benchmarks")
    sub = p.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run", help="run one scenario and write CSV")
    r.add_argument("--scenario", choices=SCENARIOS)
    r.add_argument("--preset", default=None)
    r.add_argument("--mode", choices=("sync", "async"), default=None)
    r.add_argument("--clients", type=int, default=None)
    r.add_argument("--servers", type=int, default=None)
    r.add_argument("--payload", type=int, default=None)
    r.add_argument("--baseline", default=None, help="k, v, l, a comma list, or all")
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--config", type=Path, default=None, help="key=value file")
    r.add_argument("--set", dest="sets", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one cost parameter (repeatable)")
    r.add_argument("--out", type=Path, default=None, help="CSV path (stdout when omitted)")

    pr = sub.add_parser("presets", help="inspect cost-model presets")
    pr_sub = pr.add_subparsers(dest="presets_cmd", required=True)
    pr_sub.add_parser("list", help="list presets")
    show = pr_sub.add_parser("show", help="print every parameter of a preset")
    show.add_argument("name")

    c = sub.add_parser("check", help="run the acceptance ratio suite")
    c.add_argument("--seed", type=int, default=1)
    return p


def _scenario_config(args: argparse.Namespace) -> ScenarioConfig:
    data: dict[str, object] = {}
    for item in args.sets:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        data[key.strip()] = value.strip()
    top = {"scenario": args.scenario, "preset": args.preset, "mode": args.mode, "clients": args.clients,
           "servers": args.servers, "payload": args.payload, "baseline": args.baseline, "seed": args.seed}
    data.update({k: v for k, v in top.items() if v is not None})
    if args.config is not None:
        return ScenarioConfig.from_file(args.config, data)
    return ScenarioConfig.from_mapping(data)


def _cmd_run(args: argparse.Namespace) -> int:
    cfg = _scenario_config(args)
    result = run(cfg)
    if args.out is None:
        write_rows(result.rows, sys.stdout)
        return 0
    with open(args.out, "w", newline="") as fh:
        write_rows(result.rows, fh)
    if result.timeline:
        path = args.out.with_name(args.out.name + ".timeline.csv")
        with open(path, "w", newline="") as fh:
            write_rows(result.timeline, fh, TIMELINE_HEADER)
    return 0


def _cmd_presets(args: argparse.Namespace) -> int:
    if args.presets_cmd == "list":
        for name in PRESETS:
            print(f"{name}\t{PRESET_NOTES.get(name, '')}")
        return 0
    for key, value in preset(args.name).items():
        print(f"{key} = {value}")
    return 0


def _cmd_check(args: argparse.Namespace) -> int:
    results = run_suite(args.seed, report=lambda r: print(r.line(), flush=True))
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.cmd == "run":
            if args.scenario is None and args.config is None:
                raise ConfigError("--scenario or --config is required")
            return _cmd_run(args)
        if args.cmd == "presets":
            return _cmd_presets(args)
        return _cmd_check(args)
    except ConfigError as exc:
        print(f"bench: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
