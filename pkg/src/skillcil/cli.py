"""Command-line entry point.

Subcommands:
  pretrain  -- behavior-clone the base policy and write a checkpoint
  run       -- execute a full scenario run (resumes from the last stage)
  unlearn   -- remove a task's skills from a persisted run state
  report    -- aggregate score matrices from one or more runs into a table

Config files are versioned YAML; see the schema in the README.
Exit codes: 0 success, 2 config error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import pickle
import sys
from pathlib import Path

import yaml

from . import harness, metrics, nets
from .env import EnvSpec
from .errors import ConfigError, NumericFailureError

CONFIG_VERSION = 1


def load_config(path, seed_override=None, out_override=None) -> harness.RunConfig:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc}") from exc
    try:
        doc = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config must be a mapping")
    if doc.get("version") != CONFIG_VERSION:
        raise ConfigError(
            f"unsupported config version {doc.get('version')!r}")
    try:
        env = EnvSpec(**doc.get("env", {}))
        scenario = harness.ScenarioSpec(**{
            **doc.get("scenario", {}),
            "pretrain_objects": tuple(
                doc.get("scenario", {}).get("pretrain_objects", (0, 1, 2, 3))),
        })
        method = doc.get("method", {})
        cfg = harness.RunConfig(
            env=env,
            scenario=scenario,
            method_id=method.get("id", "iscil"),
            method_params=dict(method.get("params", {})),
            seed=int(doc.get("seed", 0)),
            eval_episodes=int(doc.get("eval_episodes", 10)),
            pretrain_budget=int(doc.get("pretrain", {}).get("budget", 20000)),
            config_bytes=raw,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc
    if cfg.method_id not in harness.METHOD_IDS:
        raise ConfigError(f"unknown method id {cfg.method_id!r}")
    if seed_override is not None:
        cfg.seed = seed_override
    if out_override is not None:
        cfg.out_dir = out_override
    return cfg


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config, args.seed, args.out)
    base = harness.pretrain(cfg.env, cfg.scenario.pretrain_objects,
                            cfg.pretrain_budget, (cfg.seed, "pretrain"))
    out = Path(cfg.out_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    nets.save_policy(base, out / "base_policy.json")
    print(f"pretrained checkpoint -> {out / 'base_policy.json'} "
          f"(hash {harness.provenance_hash(cfg.config_bytes)[:12]})")
    return 0


def cmd_run(args) -> int:
    cfg = load_config(args.config, args.seed, args.out)
    if cfg.out_dir:
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.yaml").write_bytes(cfg.config_bytes)
    base = None
    if args.checkpoint:
        base = nets.load_policy(args.checkpoint)
    record = harness.run_experiment(cfg, base=base)
    _, fwt_mean = metrics.fwt(record.matrix)
    _, bwt_mean = metrics.bwt(record.matrix)
    _, auc_mean = metrics.auc(record.matrix)
    print(f"{cfg.method_id} seed={cfg.seed} "
          f"FWT={fwt_mean:.3f} BWT={bwt_mean:+.3f} AUC={auc_mean:.3f}")
    return 0


def cmd_unlearn(args) -> int:
    snaps = sorted(Path(args.out).glob("state_stage*.pkl"))
    if not snaps:
        raise ConfigError(f"no run state under {args.out!r}")
    with open(snaps[-1], "rb") as fh:
        state = pickle.load(fh)
    method = state["method"]
    if not hasattr(method, "unlearn"):
        raise ConfigError(
            f"method in {snaps[-1].name} does not support unlearning")
    removed = method.unlearn(args.task)
    state["unlearned"].add(args.task)
    with open(snaps[-1], "wb") as fh:
        pickle.dump(state, fh)
    print(f"unlearned {args.task!r}: removed {len(removed)} skill(s)")
    return 0


def cmd_report(args) -> int:
    records = []
    for run_dir in args.runs:
        meta = yaml.safe_load((Path(run_dir) / "config.yaml").read_bytes())
        matrix = metrics.load_matrix(Path(run_dir) / "scores.csv")
        records.append(harness.ResultsRecord(
            matrix=matrix, stage_times=[], provenance="",
            stage_reports=[], method_id=meta["method"]["id"],
            seed=int(meta.get("seed", 0)),
            scenario_kind=meta["scenario"]["kind"]))
    rows = harness.report(records, path=args.out)
    for row in rows:
        print(f"{row['method']:>14}  seeds={row['seeds']}  "
              f"FWT {row['fwt_mean']:.3f}±{row['fwt_std']:.3f}  "
              f"BWT {row['bwt_mean']:+.3f}±{row['bwt_std']:.3f}  "
              f"AUC {row['auc_mean']:.3f}±{row['auc_std']:.3f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="skillcil", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train and save the base checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("run", help="execute a scenario run")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--checkpoint", help="pretrained base policy JSON")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("unlearn", help="remove a task from a saved run state")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--task", required=True)
    p.set_defaults(func=cmd_unlearn)

    p = sub.add_parser("report", help="aggregate runs into a metric table")
    p.add_argument("runs", nargs="+", help="run directories")
    p.add_argument("--out", help="CSV output path")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericFailureError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
