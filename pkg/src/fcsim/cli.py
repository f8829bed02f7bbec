"""Command-line interface: run, attack, sweep, gen.

Exit codes: 0 success, 1 leak-oracle failure under --expect-sealed,
2 invalid input (config, trace, parameters).
"""

from __future__ import annotations

import argparse
import json
import sys

from . import config as config_mod
from .attacks import PROFILES, SCENARIOS, attack_matrix
from .errors import ScriptError, SimError
from .machine import Machine
from .sweep import AXES, run_sweep, to_csv
from .trace import format_trace, parse_trace, run_trace
from .workloads import KINDS, gen_workload


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fcsim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run a trace and write a JSON report")
    run_p.add_argument("--config", help="config file (key = value lines)")
    run_p.add_argument("--trace", required=True, help="trace file")
    run_p.add_argument("--out", help="report path (default stdout)")
    run_p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    run_p.add_argument("--seed", type=int)
    run_p.add_argument("--log-events", help="write per-access JSONL log here")
    run_p.add_argument("--log-coherence", help="write the protocol trace here")

    atk_p = sub.add_parser("attack", help="run side-channel scenarios")
    atk_p.add_argument("--scenario", default="all",
                       help=f"one of {', '.join(SCENARIOS)} or 'all'")
    atk_p.add_argument("--profile", default="all",
                       help="unprotected | muontrap | muontrap-clear | all")
    atk_p.add_argument("--report", help="JSON report path")
    atk_p.add_argument("--expect-sealed", action="store_true",
                       help="exit 1 if any scenario leaks")

    sweep_p = sub.add_parser("sweep", help="sweep a filter-cache parameter")
    sweep_p.add_argument("--axis", required=True, help=f"one of {', '.join(AXES)}")
    sweep_p.add_argument("--values", required=True, help="comma-separated ascending values")
    sweep_p.add_argument("--trace", required=True)
    sweep_p.add_argument("--config")
    sweep_p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    sweep_p.add_argument("--out", help="CSV path (default stdout)")
    sweep_p.add_argument("--jobs", type=int, default=1)

    gen_p = sub.add_parser("gen", help="generate a synthetic workload trace")
    gen_p.add_argument("--kind", required=True, help=f"one of {', '.join(KINDS)}")
    gen_p.add_argument("--params", default="", metavar="K=V,K=V")
    gen_p.add_argument("--seed", type=int, default=0)
    gen_p.add_argument("--out", help="trace path (default stdout)")
    return parser


def _load_config(path: str | None, sets: list[str], seed: int | None = None):
    if path:
        with open(path) as fh:
            cfg = config_mod.from_text(fh.read())
    else:
        cfg = config_mod.RunConfig()
    for item in sets:
        if "=" not in item:
            raise config_mod.ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        config_mod.set_key(cfg, key.strip(), value)
    if seed is not None:
        cfg.seed = seed
    cfg.validate()
    return cfg


def _write(path: str | None, text: str) -> None:
    if path:
        with open(path, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _cmd_run(args) -> int:
    cfg = _load_config(args.config, args.set, args.seed)
    with open(args.trace) as fh:
        records = parse_trace(fh.read())
    machine = Machine(cfg, log_events=bool(args.log_events),
                      log_protocol=bool(args.log_coherence))
    stats = run_trace(machine, records)
    report = {"config": config_mod.to_dict(cfg), "stats": stats}
    _write(args.out, json.dumps(report, sort_keys=True, indent=2) + "\n")
    if args.log_events:
        with open(args.log_events, "w") as fh:
            for entry in machine.access_log:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
    if args.log_coherence:
        with open(args.log_coherence, "w") as fh:
            for msg in machine.bus.log:
                fh.write(msg.format() + "\n")
    return 0


def _cmd_attack(args) -> int:
    if args.scenario != "all" and args.scenario not in SCENARIOS:
        raise ScriptError(f"unknown scenario {args.scenario!r}")
    if args.profile != "all" and args.profile not in PROFILES:
        raise ScriptError(f"unknown profile {args.profile!r}")
    names = list(SCENARIOS) if args.scenario == "all" else [args.scenario]
    profiles = list(PROFILES) if args.profile == "all" else [args.profile]
    report = attack_matrix(names, profiles)
    leaked = []
    for name, row in report["scenarios"].items():
        for profile, cell in row["profiles"].items():
            state = "LEAKS" if cell["leaks"] else "sealed"
            print(f"{name:28s} {profile:34s} {state}")
            if cell["leaks"]:
                leaked.append((name, profile))
    if args.report:
        _write(args.report, json.dumps(report, sort_keys=True, indent=2) + "\n")
    if args.expect_sealed and leaked:
        return 1
    return 0


def _cmd_sweep(args) -> int:
    cfg = _load_config(args.config, args.set)
    with open(args.trace) as fh:
        records = parse_trace(fh.read())
    values = [int(v, 0) for v in args.values.split(",") if v.strip()]
    rows = run_sweep(cfg, args.axis, values, records, jobs=args.jobs)
    _write(args.out, to_csv(rows))
    return 0


def _cmd_gen(args) -> int:
    params = {}
    if args.params:
        for item in args.params.split(","):
            if not item.strip():
                continue
            if "=" not in item:
                raise ScriptError(f"--params expects K=V pairs, got {item!r}")
            key, value = item.split("=", 1)
            params[key.strip()] = value.strip()
    records = gen_workload(args.kind, params, seed=args.seed)
    _write(args.out, format_trace(records))
    return 0


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    handlers = {"run": _cmd_run, "attack": _cmd_attack,
                "sweep": _cmd_sweep, "gen": _cmd_gen}
    try:
        return handlers[args.command](args)
    except (SimError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
