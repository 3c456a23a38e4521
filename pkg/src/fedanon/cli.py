"""Command line entry points.

Subcommands: gen-world (write a dataset bundle), federate (run FL and dump
the delta log), attack (run an experiment family and write its report),
mitigate (shortcut for the mitigation family), report (re-emit a saved
report in another format). Every config key is mirrored as a --flag;
precedence is flags > config file > defaults.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields
from pathlib import Path

from .config import EXPERIMENT_FAMILIES, ConfigError, ExperimentConfig, build_config
from .deltastore import manifest_for, write_records
from .experiments import (
    model_spec_from,
    round_config_from,
    run_experiment,
    world_config_from,
)
from .federated import run_federated
from .reporting import Table, report_from_json, table_to_csv, write_report
from .world import gen_world, save_bundle


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="FILE", help="key = value config document")
    parser.add_argument(
        "--out-dir", dest="cfg_out_dir", metavar="DIR", help="output directory"
    )
    for f in fields(ExperimentConfig):
        if f.name == "out_dir":
            continue
        flag = "--" + f.name.replace("_", "-")
        parser.add_argument(flag, dest=f"cfg_{f.name}", metavar="V", help=argparse.SUPPRESS)


def _config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    overrides = {}
    for f in fields(ExperimentConfig):
        value = getattr(args, f"cfg_{f.name}", None)
        if value is not None:
            overrides[f.name] = value
    return build_config(args.config, overrides)


def _cmd_gen_world(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    bundle = gen_world(world_config_from(cfg))
    out = Path(args.out or (Path(cfg.out_dir) / "world.npz"))
    out.parent.mkdir(parents=True, exist_ok=True)
    save_bundle(out, bundle)
    n = sum(len(v) for v in bundle.user_examples.values())
    print(f"wrote {out} ({len(bundle.users)} users, {n} pooled examples)")
    return 0


def _cmd_federate(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    bundle = gen_world(world_config_from(cfg))
    spec = model_spec_from(cfg)
    run = run_federated(bundle, spec, round_config_from(cfg))
    out = Path(cfg.out_dir)
    manifest = manifest_for(run.records, spec.layout(), cfg.rounds)
    write_records(out, manifest, run.records)
    utility = Table(
        name="utility",
        columns=["round", "task_score"],
        rows=[[t + 1, float(s)] for t, s in enumerate(run.utility)],
    )
    (out / "utility.csv").write_text(table_to_csv(utility), encoding="utf-8", newline="")
    print(
        f"wrote {out}/manifest.json, deltas.bin, utility.csv "
        f"({len(run.records)} records, final score {run.utility[-1]:.3f})"
    )
    return 0


def _cmd_attack(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    report = run_experiment(cfg, args.family)
    formats = ("json", "csv") if args.format == "both" else (args.format,)
    paths = write_report(report, cfg.out_dir, formats)
    for p in paths:
        print(f"wrote {p}")
    return 0


def _cmd_mitigate(args: argparse.Namespace) -> int:
    args.family = "mitigation"
    return _cmd_attack(args)


def _cmd_report(args: argparse.Namespace) -> int:
    report = report_from_json(Path(args.report).read_text(encoding="utf-8"))
    formats = ("json", "csv") if args.format == "both" else (args.format,)
    paths = write_report(report, args.out_dir or Path(args.report).parent, formats)
    for p in paths:
        print(f"wrote {p}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedanon",
        description="federated learning deanonymization benchmark",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-world", help="generate a dataset bundle (.npz)")
    _add_config_flags(p)
    p.add_argument("--out", metavar="FILE", help="output bundle path")
    p.set_defaults(func=_cmd_gen_world)

    p = sub.add_parser("federate", help="run FL and write the delta log")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_federate)

    p = sub.add_parser("attack", help="run an experiment family end to end")
    _add_config_flags(p)
    p.add_argument("--family", required=True, choices=EXPERIMENT_FAMILIES)
    p.add_argument("--format", choices=("json", "csv", "both"), default="both")
    p.set_defaults(func=_cmd_attack)

    p = sub.add_parser("mitigate", help="run the mitigation tradeoff sweep")
    _add_config_flags(p)
    p.add_argument("--format", choices=("json", "csv", "both"), default="both")
    p.set_defaults(func=_cmd_mitigate)

    p = sub.add_parser("report", help="re-emit a saved JSON report")
    p.add_argument("--report", required=True, metavar="FILE")
    p.add_argument("--format", choices=("json", "csv", "both"), default="csv")
    p.add_argument("--out-dir", metavar="DIR")
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except (ValueError, OSError, KeyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
