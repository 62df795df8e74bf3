"""Command-line pipeline driver.

Exit codes: 0 success, 2 validation error, 3 dependency error (a
prerequisite stage has not run), 4 numerical failure (NaN/Inf detected).
"""

import os

# Deterministic, oversubscription-free linear algebra: must precede numpy.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import sys
from dataclasses import fields

from .config import RunConfig
from .pipeline import (
    DependencyError,
    ValidationError,
    report_parameter_budget,
    stage_ablate,
    stage_evaluate,
    stage_gen_data,
    stage_generate,
    stage_pretrain_lm,
    stage_sweep,
    stage_train_judge,
    stage_train_navigator,
    stage_train_prompt,
)
from .tensor import CheckpointError, NumericsError

STAGES = ("gen-data", "pretrain-lm", "train-prompt", "train-navigator",
          "train-eval-classifier", "generate", "evaluate", "ablate", "sweep")

_FLAG_RENAMES = {"lam": "lambda"}


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    for f in fields(RunConfig):
        flag = "--" + _FLAG_RENAMES.get(f.name, f.name).replace("_", "-")
        if f.type == "bool" or isinstance(f.default, bool):
            parser.add_argument(flag, dest=f.name, action="store_true", default=None)
        else:
            parser.add_argument(flag, dest=f.name, type=type(f.default), default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="courtview",
        description="Court view generation: knowledge-injected prefix tuning "
                    "with a classifier-guided decoding navigator.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES:
        p = sub.add_parser(name)
        p.add_argument("--run-dir", required=True)
        p.add_argument("--config", help="JSON config file (unknown keys rejected)")
        p.add_argument("--force", action="store_true",
                       help="accept artifacts whose config hash differs")
        if name == "generate":
            p.add_argument("--tag", help="output tag (default: variant name)")
            p.add_argument("--variant", choices=("kig", "no_v", "no_la"),
                           help="which trained prompt encoder to decode with")
        if name == "evaluate":
            p.add_argument("--tag", required=True)
        if name == "sweep":
            p.add_argument("--param", choices=("lambda", "k"), required=True)
        _add_config_flags(p)
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    if args.config:
        cfg = RunConfig.from_file(args.config)
    else:
        cfg = RunConfig()
    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig)
                 if getattr(args, f.name, None) is not None}
    if overrides:
        from dataclasses import replace
        cfg = replace(cfg, **overrides)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = config_from_args(args)
        run_dir = args.run_dir
        if args.command == "gen-data":
            stage_gen_data(cfg, run_dir)
        elif args.command == "pretrain-lm":
            stage_pretrain_lm(cfg, run_dir)
        elif args.command == "train-prompt":
            stage_train_prompt(cfg, run_dir)
        elif args.command == "train-navigator":
            stage_train_navigator(cfg, run_dir)
        elif args.command == "train-eval-classifier":
            stage_train_judge(cfg, run_dir)
        elif args.command == "generate":
            stage_generate(cfg, run_dir, tag=args.tag, variant=args.variant,
                           jobs=cfg.jobs, force=args.force)
        elif args.command == "evaluate":
            stage_evaluate(cfg, run_dir, args.tag, force=args.force)
        elif args.command == "ablate":
            ratio = report_parameter_budget(cfg, run_dir) if _artifacts_ready(run_dir) else None
            stage_ablate(cfg, run_dir, jobs=cfg.jobs)
            if ratio is None:
                report_parameter_budget(cfg, run_dir)
        elif args.command == "sweep":
            stage_sweep(cfg, run_dir, args.param, jobs=cfg.jobs)
    except (ValidationError, ValueError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DependencyError as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return 3
    except NumericsError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4
    return 0


def _artifacts_ready(run_dir) -> bool:
    from pathlib import Path
    return (Path(run_dir) / "ckpt" / "lm.ckpt").exists()


if __name__ == "__main__":
    sys.exit(main())
