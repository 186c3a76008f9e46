"""Command-line interface.

Stages of an iteration can be run one at a time (sample, queries, judge,
mine, train, validate) or together (iterate); final-eval and report cover
the held-out evaluation. Exit codes: 0 success, 2 precondition violation,
3 external-service failure, 4 teacher budget exceeded.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .corpus import save_documents
from .errors import (
    BudgetExceededError,
    CorpustuneError,
    PreconditionError,
    TransportError,
)
from .pipeline import PipelineConfig, PipelineRunner, render_report
from .synthworld import make_synthetic_world


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="corpustune",
        description="Adapt a retrieval bi-encoder to a corpus by iterative "
                    "teacher-student distillation.")
    parser.add_argument("--config", help="path to the pipeline config JSON")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--iteration", type=int, default=0,
                        help="iteration number for stage commands")
    parser.add_argument("--class", dest="doc_class",
                        help="restrict a stage to one document class "
                             "(the stage is then not marked complete)")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in [
        ("ingest", "validate the source corpus and copy it into the run"),
        ("chunk", "chunk the ingested documents"),
        ("folds", "assign train/val/test folds by date"),
        ("sample", "draw the per-class document sample for an iteration"),
        ("queries", "generate InPars and synthetic queries"),
        ("judge", "retrieve, sample judgment sets, and judge them"),
        ("mine", "extract contrastive triples from judgments"),
        ("train", "retrain the student model on accumulated triples"),
        ("validate", "re-judge under the new model and compute metrics"),
        ("iterate", "run all stages of one iteration in order"),
        ("final-eval", "run the held-out adaptive evaluation"),
        ("report", "render the final-evaluation summary table"),
    ]:
        sub.add_parser(name, help=help_text)

    synth = sub.add_parser("synth-world",
                           help="write a deterministic synthetic corpus")
    synth.add_argument("--out", required=True, help="output documents JSONL")
    synth.add_argument("--world-seed", type=int, default=0)
    synth.add_argument("--classes", type=int, default=3)
    synth.add_argument("--docs-per-class", type=int, default=50)
    synth.add_argument("--chunks-per-doc", type=int, default=20)
    synth.add_argument("--topics", type=int, default=10)

    report = sub.choices["report"]
    report.add_argument("--json-out", help="also write the summary rows as JSON")
    return parser


def _runner(args) -> PipelineRunner:
    if not args.config:
        raise PreconditionError("--config is required for this command")
    config = PipelineConfig.from_json(args.config)
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    runner = PipelineRunner(config)
    runner.class_filter = args.doc_class
    return runner

STAGE_COMMANDS = ("sample", "queries", "judge", "mine", "train", "validate")


def run(args) -> int:
    if args.command == "synth-world":
        world = make_synthetic_world(
            seed=args.world_seed, n_classes=args.classes,
            docs_per_class=args.docs_per_class,
            chunks_per_doc=args.chunks_per_doc,
            topics_per_class=args.topics)
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        save_documents(out, world.documents)
        print(f"wrote {len(world.documents)} documents to {out}")
        return 0

    runner = _runner(args)
    if args.command == "ingest":
        print(runner.ingest())
    elif args.command == "chunk":
        print(runner.chunk())
    elif args.command == "folds":
        print(runner.folds())
    elif args.command in STAGE_COMMANDS:
        runner.run_stage(args.command, args.iteration)
        print(f"stage {args.command} done for iteration {args.iteration}")
    elif args.command == "iterate":
        manifest = runner.run_iteration(args.iteration)
        print(f"iteration {args.iteration} complete; model out: "
              f"{manifest.model_out}")
    elif args.command == "final-eval":
        rows = runner.run_final_evaluation()
        text, _summary = render_report(rows, runner.config.eval.k)
        print(text, end="")
    elif args.command == "report":
        rows = runner.load_final_reports()
        text, summary = render_report(rows, runner.config.eval.k,
                                      manifests=runner.load_manifests())
        print(text, end="")
        if getattr(args, "json_out", None):
            Path(args.json_out).write_text(
                json.dumps(summary, sort_keys=True, indent=2) + "\n",
                encoding="utf-8")
    else:  # pragma: no cover - argparse enforces the choices
        raise PreconditionError(f"unknown command {args.command!r}")
    return 0


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except BudgetExceededError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except TransportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (PreconditionError, CorpustuneError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
