"""Command-line entry point.

Subcommands run one pipeline stage each against a run directory derived
from the resolved configuration (config file defaults, then flag
overrides; flags win). Exit codes: 0 ok, 2 usage, 3 data integrity,
4 numeric failure, 5 io.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

from .errors import EXIT_IO, EXIT_OK, EXIT_USAGE, TokentraceError
from .pipeline import (
    RunConfig,
    config_from_dict,
    default_config,
    run_dir,
    stage_coldstart,
    stage_evaluate,
    stage_prepare,
    stage_report,
    stage_simulate,
    stage_train,
)

_STAGES = {
    "simulate": stage_simulate,
    "prepare": stage_prepare,
    "train": stage_train,
    "evaluate": stage_evaluate,
}


def _add_override_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="config file (JSON); flags override its values")
    parser.add_argument("--seed", type=int, help="global seed (also seeds simulator and training)")
    parser.add_argument("--model", choices=("ntkt", "dkt"), help="model family")
    parser.add_argument(
        "--repr",
        dest="representation",
        choices=("full_text", "concept_only", "id_only"),
        help="serialization representation",
    )
    parser.add_argument("--output-root", help="directory that holds run directories")
    parser.add_argument("--learners", type=int, help="simulated learner count")
    parser.add_argument("--exercises", type=int, help="simulated exercise count")
    parser.add_argument("--concepts", type=int, help="simulated concept count")
    parser.add_argument(
        "--seq-range",
        dest="seq_range",
        type=int,
        nargs=2,
        metavar=("MIN", "MAX"),
        help="interactions per simulated learner",
    )
    parser.add_argument(
        "--split",
        dest="split_kind",
        choices=("holdout_by_learner", "question_coldstart"),
        help="evaluation split kind",
    )
    parser.add_argument("--train-fraction", type=float, help="fraction of learners used for training")
    parser.add_argument("--held-out-questions", type=int, help="exercises held out of training")
    parser.add_argument("--char-budget", type=int, help="history character budget per example")
    parser.add_argument("--vocab-size", type=int, help="maximum vocabulary size")
    parser.add_argument("--max-steps", type=int, help="maximum optimizer steps")
    parser.add_argument("--eval-every", type=int, help="steps between evaluations")
    parser.add_argument("--target-rate", type=float, help="calibrate intercept to this correctness rate")


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    if args.config is not None:
        with open(args.config, encoding="utf-8") as f:
            try:
                raw = json.load(f)
            except json.JSONDecodeError as e:
                raise TokentraceError(f"config file is not valid JSON: {e}") from None
        config = config_from_dict(raw)
    else:
        config = default_config()

    sim_updates = {}
    train_updates = {}
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
        sim_updates["seed"] = args.seed
        train_updates["seed"] = args.seed
    if args.learners is not None:
        sim_updates["n_learners"] = args.learners
    if args.exercises is not None:
        sim_updates["n_exercises"] = args.exercises
    if args.concepts is not None:
        sim_updates["n_concepts"] = args.concepts
    if args.seq_range is not None:
        sim_updates["sequence_length_range"] = tuple(args.seq_range)
    if args.max_steps is not None:
        train_updates["max_steps"] = args.max_steps
    if args.eval_every is not None:
        train_updates["eval_every"] = args.eval_every
    for flag, field_name in (
        ("model", "model"),
        ("representation", "representation"),
        ("output_root", "output_root"),
        ("split_kind", "split_kind"),
        ("train_fraction", "train_fraction"),
        ("held_out_questions", "held_out_questions"),
        ("char_budget", "char_budget"),
        ("vocab_size", "vocab_max_size"),
        ("target_rate", "target_rate"),
    ):
        value = getattr(args, flag)
        if value is not None:
            updates[field_name] = value
    if sim_updates:
        updates["sim"] = dataclasses.replace(config.sim, **sim_updates)
    if train_updates:
        updates["train"] = dataclasses.replace(config.train, **train_updates)
    if updates:
        config = dataclasses.replace(config, **updates)
    return config


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tokentrace",
        description="Predict student answer correctness from interaction histories, with a DKT baseline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("simulate", "generate a synthetic dataset, ground truth, and split"),
        ("prepare", "serialize the training stream and build the vocabulary"),
        ("train", "fine-tune the configured model on the prepared data"),
        ("evaluate", "sequentially evaluate the trained model on test learners"),
        ("coldstart", "aggregate predictions into cold-start reports"),
    ):
        p = sub.add_parser(name, help=help_text)
        _add_override_flags(p)
        if name == "coldstart":
            p.add_argument("--mode", choices=("user", "question"), required=True)
    p = sub.add_parser("report", help="aggregate persisted metrics across run directories")
    p.add_argument("--runs", nargs="+", required=True, help="run directories to compare")
    p.add_argument("--out", default="report", help="output directory for the comparison")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    try:
        if args.command == "report":
            out = stage_report(args.runs, args.out)
            print(f"report written to {out}")
            return EXIT_OK
        config = _resolve_config(args)
        if args.command == "coldstart":
            directory = stage_coldstart(config, args.mode)
        else:
            directory = _STAGES[args.command](config)
        print(f"{args.command} complete: {directory}")
        return EXIT_OK
    except TokentraceError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except FileNotFoundError as e:
        print(f"missing input: {e}", file=sys.stderr)
        return EXIT_IO
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"invalid value: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
