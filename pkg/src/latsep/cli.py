"""Command-line surface: poison / train / defend / evaluate / plot / run.

Every command takes an experiment config (YAML path or ``preset:<name>``);
flags override the corresponding config keys. Stage failures exit with
stage-tagged codes (see ``pipeline.STAGE_EXIT_CODES``).
"""

from __future__ import annotations

import argparse
import os
import sys

from .config import ExperimentConfig, load_config
from .data import DATA_ROOT_ENV
from .errors import ConfigError, LatsepError, StageError
from .pipeline import (
    STAGE_EXIT_CODES,
    export_poisoned_npz,
    figures_from_run,
    prepare_poisoned,
    run_pipeline,
)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", "-c", required=True,
                        help="experiment config: YAML path or preset:<name>")
    parser.add_argument("--output", "-o", help="override output_dir")
    parser.add_argument("--seeds", help="comma-separated seed list override")
    parser.add_argument("--defenses", help="comma-separated defense list override, or 'none'")
    parser.add_argument("--desk-scale", action="store_true",
                        help="force the desk-scale training preset")
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--data-root", help=f"data cache root (else ${DATA_ROOT_ENV})")
    parser.add_argument("--progress", action="store_true", help="show progress bars")


def _resolve_config(args) -> ExperimentConfig:
    config = load_config(args.config)
    overrides = {}
    if args.output:
        overrides["output_dir"] = args.output
    if args.seeds:
        overrides["seeds"] = [int(s) for s in args.seeds.split(",") if s]
    if args.defenses is not None:
        if args.defenses.strip().lower() == "none":
            overrides["defenses"] = []
        else:
            overrides["defenses"] = [{"name": d.strip()} for d in args.defenses.split(",") if d.strip()]
    if args.desk_scale:
        overrides["train"] = {"preset": "desk"}
    if args.data_root:
        os.environ[DATA_ROOT_ENV] = args.data_root
    return config.with_overrides(**overrides) if overrides else config


def cmd_poison(args) -> int:
    state = prepare_poisoned(_resolve_config(args), device=args.device)
    npz = export_poisoned_npz(state)
    print(f"run directory: {state.run.path}")
    print(f"poisoned data: {npz}")
    print(f"manifest digest: {state.manifest.content_digest}")
    return 0


def cmd_train(args) -> int:
    run_pipeline(_resolve_config(args), device=args.device, progress=args.progress,
                 stop_after="train")
    print("base models trained; checkpoints in the run directory")
    return 0


def cmd_defend(args) -> int:
    run_pipeline(_resolve_config(args), device=args.device, progress=args.progress,
                 stop_after="defend")
    print("defense rows written to the run directory")
    return 0


def cmd_evaluate(args) -> int:
    report = run_pipeline(_resolve_config(args), device=args.device, progress=args.progress)
    print(report.to_text())
    return 0


def cmd_plot(args) -> int:
    figures_from_run(_resolve_config(args), device=args.device)
    print("figures written to the run directory")
    return 0


def cmd_run(args) -> int:
    config = _resolve_config(args)
    report = run_pipeline(config, device=args.device, progress=args.progress)
    print(report.to_text())
    print(f"artifacts in: {config.output_dir}")
    return 0


COMMANDS = {
    "poison": (cmd_poison, "materialize the poisoned training set and its manifest"),
    "train": (cmd_train, "train the victim models for every seed/augmentation variant"),
    "defend": (cmd_defend, "run the configured defenses against trained models"),
    "evaluate": (cmd_evaluate, "run the pipeline end to end and print the metric table"),
    "plot": (cmd_plot, "render latent-space figures for an existing run"),
    "run": (cmd_run, "composite: poison, train, defend, evaluate, plot"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latsep",
        description="adaptive backdoor poisoning and latent-separability defense toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handler = COMMANDS[args.command][0]
    try:
        return handler(args)
    except StageError as exc:
        print(f"error in stage '{exc.stage}': {exc}", file=sys.stderr)
        return STAGE_EXIT_CODES.get(exc.stage.split("-")[0], 1)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return STAGE_EXIT_CODES["config"]
    except LatsepError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
