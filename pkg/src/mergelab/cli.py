"""Command-line entry point: one subcommand per pipeline stage.

Every subcommand takes --config (JSON, omitted = built-in defaults) plus
--seed and --out overrides. Stages reuse artifacts already present in the
output directory; `run` recomputes the whole pipeline from scratch.
"""
from __future__ import annotations

import argparse
import json
import sys

from .errors import StageError
from .harness import ExperimentConfig, Pipeline, load_config, run_experiment

STAGES = ("gen-data", "pretrain", "finetune", "attack", "merge", "evaluate", "sweep-lambda", "run")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mergelab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES:
        p = sub.add_parser(name)
        p.add_argument("--config", help="path to experiment config JSON (defaults apply when omitted)")
        p.add_argument("--seed", type=int, help="override the experiment seed")
        p.add_argument("--out", help="override the output directory")
    return parser


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load(args)
        if args.command == "run":
            report = run_experiment(cfg)
            print(f"wrote {cfg.out_dir}/report.json")
            print(json.dumps({k: report[k] for k in ("clean",) if k in report}, sort_keys=True))
            return 0
        pipe = Pipeline(cfg)
        if args.command == "gen-data":
            data = pipe.gen_data()
            print(f"generated {len(data)} task(s) under {cfg.out_dir}/data")
        elif args.command == "pretrain":
            pipe.pretrained()
            print(f"wrote {cfg.out_dir}/checkpoints/pretrained.tckp")
        elif args.command == "finetune":
            models = pipe.clean_models()
            print(f"fine-tuned {len(models)} provider model(s)")
        elif args.command == "attack":
            artifacts = pipe.attack_artifacts()
            if not artifacts:
                print("attack method is 'none'; nothing to do")
            else:
                print(f"optimized {len(artifacts['triggers'])} trigger(s); wrote adversary checkpoint")
        elif args.command == "merge":
            pipe.merged("clean")
            if cfg.attack.method != "none":
                pipe.merged("backdoored")
            print(f"wrote merged checkpoint(s) under {cfg.out_dir}/checkpoints")
        elif args.command == "evaluate":
            pipe.report()
            print(f"wrote {cfg.out_dir}/report.json")
        elif args.command == "sweep-lambda":
            rows = pipe.sweep()
            print(f"wrote {cfg.out_dir}/sweep.csv ({len(rows)} rows)")
        return 0
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # config/contract errors outside a stage
        print(f"error: stage '{args.command}': {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
