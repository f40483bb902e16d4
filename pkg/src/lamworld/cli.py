"""Command-line entry points for the training and evaluation pipeline."""

from __future__ import annotations

import argparse
import sys

from .config import RunConfig, load_config
from .errors import ConfigError, MissingArtifact, TrainingDiverged


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, help="config file (desk defaults when omitted)")
    parser.add_argument("--run-dir", default=None, help="artifact root (overrides config and env)")
    parser.add_argument("--force", action="store_true", help="redo the stage even if complete")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lamworld",
        description="sprite-world latent actions, world model, and policy pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("gen-data", "generate sprite datasets and run the video pipeline"),
        ("train-lam", "train the latent action model"),
        ("label", "label datasets with latent actions"),
        ("train-world", "train the flow world model"),
        ("train-policy", "train the foundation policy"),
        ("finetune-lowlevel", "finetune the low-level policy on a fraction of episodes"),
        ("pipeline", "run every stage in order"),
    ):
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        if name in ("finetune-lowlevel", "pipeline"):
            p.add_argument("--fraction", type=float, default=None, help="episode fraction override")
    p = sub.add_parser("eval", help="run an evaluation suite")
    p.add_argument("suite", help="suite name or 'all'")
    _add_common(p)
    p = sub.add_parser("serve", help="start the inference service")
    _add_common(p)
    p.add_argument("--host", default=None)
    p.add_argument("--port", type=int, default=None)
    return parser


def _load(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.run_dir:
        cfg.run_dir_override = args.run_dir
    return cfg


def run_command(args) -> int:
    from . import evalrun, pipeline

    cfg = _load(args)
    force = getattr(args, "force", False)
    if args.command == "gen-data":
        pipeline.gen_data(cfg, force)
    elif args.command == "train-lam":
        pipeline.train_lam_stage(cfg, force)
    elif args.command == "label":
        pipeline.label_stage(cfg, force)
    elif args.command == "train-world":
        pipeline.train_world_stage(cfg, force)
    elif args.command == "train-policy":
        pipeline.train_policy_stage(cfg, force)
    elif args.command == "finetune-lowlevel":
        pipeline.finetune_stage(cfg, force, fraction=args.fraction)
    elif args.command == "pipeline":
        pipeline.gen_data(cfg, force)
        pipeline.train_lam_stage(cfg, force)
        pipeline.label_stage(cfg, force)
        pipeline.train_world_stage(cfg, force)
        pipeline.train_policy_stage(cfg, force)
        pipeline.finetune_stage(cfg, force, fraction=args.fraction)
    elif args.command == "eval":
        evalrun.run_suite(cfg, args.suite)
    elif args.command == "serve":
        import uvicorn

        from .service import create_app

        app = create_app(cfg)
        uvicorn.run(
            app,
            host=args.host or cfg.service.host,
            port=args.port or cfg.service.port,
            log_level="warning",
        )
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return run_command(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except MissingArtifact as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return 3
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
