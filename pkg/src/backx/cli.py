"""Command-line front end for the pipeline stages."""
from __future__ import annotations

import argparse
import logging
import sys

from . import harness
from .errors import (
    EXIT_ERROR,
    EXIT_EVALUATION,
    EXIT_GATE,
    EXIT_INGESTION,
    EXIT_OK,
    BackxError,
    EvaluationError,
    GateFailure,
    IngestionError,
    UndefinedMetricError,
)

COMMANDS = ("poison", "train", "attribute", "evaluate", "report", "all")


class _Parser(argparse.ArgumentParser):
    # usage mistakes exit 1; code 2 is reserved for gate failures
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        sys.exit(EXIT_ERROR)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="backx",
                     description="Backdoor-based benchmark for attribution methods")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "poison": "stamp and relabel the training split",
        "train": "train the trojan and its benign twin, then verify the gate",
        "attribute": "compute attribution maps for the configured methods",
        "evaluate": "sweep recovery rates and write metric reports",
        "report": "render figures and the summary table from the reports",
        "all": "run every stage in order",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", required=True, help="experiment config (JSON)")
        p.add_argument("--out", help="output directory (overrides the config)")
        p.add_argument("--seed", type=int, help="global seed (overrides the config)")
        p.add_argument("--resume", action="store_true",
                       help="reuse completed stages instead of starting fresh")
        p.add_argument("--methods", help="comma-separated method subset")
        p.add_argument("--k-grid", dest="k_grid", help="comma-separated recovery rates")
    return parser


def _run(args) -> int:
    methods = args.methods.split(",") if args.methods else None
    k_grid = [float(x) for x in args.k_grid.split(",")] if args.k_grid else None
    config = harness.load_config(args.config, out_dir=args.out, seed=args.seed,
                                 methods=methods, k_grid=k_grid)

    if args.command == "poison":
        poisoned, hit = harness.cmd_poison(config)
        print(f"poisoned {len(poisoned.poisoned_indices)} of {len(poisoned.train)} "
              f"training samples{' (cached)' if hit else ''}")
    elif args.command == "train":
        card, gate, hit = harness.cmd_train(config)
        print(f"clean accuracy      {card.clean_accuracy:.4f}")
        print(f"poisoned accuracy   {card.poisoned_accuracy:.4f}")
        print(f"benign twin accuracy {card.benign_twin_accuracy:.4f}")
        print(f"gate: {'pass' if gate.passed else 'FAIL'}{' (cached)' if hit else ''}")
    elif args.command == "attribute":
        archives, hit = harness.cmd_attribute(config)
        for label, path in sorted(archives.items()):
            print(f"{label}: {path}{' (cached)' if hit else ''}")
    elif args.command == "evaluate":
        reports, hit = harness.cmd_evaluate(config)
        for rep in reports:
            i = len(rep.k_values) // 2
            print(f"{rep.method}: ASR@{rep.k_values[i]:.3f}={rep.asr_curve[i]:.3f} "
                  f"FLC={rep.flc[i]:.3f}{' (cached)' if hit else ''}")
        print(f"reports under {harness.reports_dir(config)}")
    elif args.command == "report":
        for path in harness.cmd_report(config):
            print(path)
    else:
        harness.cmd_all(config, resume=args.resume)
        print(f"run complete; ledger at {harness.ledger_path(config)}")
    return EXIT_OK


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    args = build_parser().parse_args(argv)
    try:
        return _run(args)
    except GateFailure as exc:
        print(f"gate failure: {'; '.join(exc.reasons)}", file=sys.stderr)
        return EXIT_GATE
    except IngestionError as exc:
        print(f"ingestion error: {exc}", file=sys.stderr)
        return EXIT_INGESTION
    except (EvaluationError, UndefinedMetricError) as exc:
        print(f"evaluation error: {exc}", file=sys.stderr)
        return EXIT_EVALUATION
    except BackxError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


def entry():
    raise SystemExit(main())
