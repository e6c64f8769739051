"""Command-line entry point.

Every subcommand reads a JSON experiment config, writes its artifacts
under ``--out`` and exits non-zero (naming the failed stage on stderr) if
any stage fails.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace

from .experiment import ExperimentConfig, materialize, report, run_scenario, sweep

# subcommand -> (stages, forced attack kind)
COMMANDS = {
    "train": (("data", "train"), None),
    "unlearn": (("data", "train", "unlearn"), None),
    "attack-ulira": (("data", "train", "unlearn", "attack"), "ulira"),
    "attack-ggd": (("data", "train", "unlearn", "attack"), "ggd"),
    "attack-recon": (("data", "train", "unlearn", "attack"), "recon"),
    "theory-bounds": (("theory",), None),
}


def _load(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    return materialize(cfg, args.master_seed)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="warplab", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="experiment config (JSON); defaults if omitted")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--master-seed", type=int, default=None,
                       help="derive every stage seed from this value")
        p.add_argument("--workers", type=int, default=1, help="parallel shadow workers")

    for name in COMMANDS:
        p = sub.add_parser(name)
        common(p)
        if name == "attack-recon":
            p.add_argument("--adaptive", action="store_true",
                           help="run the symmetry-aware attacker instead")
    p = sub.add_parser("sweep")
    common(p)
    p.add_argument("--axis", required=True, help="dotted config field, e.g. warp.var_target")
    p.add_argument("--values", required=True, nargs="*", help="values (parsed as JSON)")
    p.add_argument("--stages", default=",".join(("data", "train", "unlearn", "attack")),
                   help="comma-separated stages per run")
    p = sub.add_parser("report")
    common(p)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return 2
    try:
        if args.command == "report":
            rows = report(args.out)
            print(f"{len(rows)} runs summarised in {args.out}/report.tsv")
            return 0
        cfg = _load(args)
    except Exception as exc:  # noqa: BLE001
        print(f"failed stage: config: {exc}", file=sys.stderr)
        return 2
    if args.command == "sweep":
        values = [_parse_value(v) for v in args.values]
        stages = tuple(s for s in args.stages.split(",") if s)
        try:
            mans, _ = sweep(cfg, args.axis, values, args.out, args.workers, stages)
        except (KeyError, TypeError, ValueError) as exc:
            print(f"failed stage: sweep: {exc}", file=sys.stderr)
            return 2
        bad = [m for m in mans if not m.ok]
        for m in bad:
            print(f"failed stage: {m.failed_stage} in {m.out_dir}: {m.error}", file=sys.stderr)
        print(f"{len(mans) - len(bad)}/{len(mans)} runs ok; summary in {args.out}/sweep_summary.tsv")
        return 1 if bad else 0
    stages, kind = COMMANDS[args.command]
    if kind == "recon" and args.adaptive:
        kind = "adaptive_recon"
    if kind is not None:
        cfg = replace(cfg, attack=replace(cfg.attack, kind=kind))
    if args.command == "theory-bounds" and cfg.theory is None:
        print("failed stage: theory: config has no theory block", file=sys.stderr)
        return 2
    man = run_scenario(cfg, args.out, args.workers, stages)
    if not man.ok:
        print(f"failed stage: {man.failed_stage}: {man.error}", file=sys.stderr)
        return 1
    print(f"ok: {len(man.artifacts)} artifacts in {args.out} (config {man.config_hash[:12]})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
