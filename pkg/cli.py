"""Command-line surface: gen-corpus, train, eval and grad-check."""

import argparse
import json
import logging
import os
import sys
from typing import List, Optional

from dotenv import load_dotenv

from errors import AvseError
from experiment_config import load_experiment_config
from experiment_service import ExperimentService, evaluate_checkpoint

logger = logging.getLogger(__name__)


def configure_logging() -> None:
    load_dotenv()
    logging.basicConfig(
        level=os.getenv("AVSE_LOG_LEVEL", "INFO").upper(),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, help="experiment config (JSON)")
    parser.add_argument("--out", default=None, help="output directory (overrides the config)")
    parser.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    parser.add_argument("--preset", choices=["desk", "paper"], default=None, help="model size preset")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="avse", description=__doc__)
    commands = parser.add_subparsers(dest="command", required=True)

    gen = commands.add_parser("gen-corpus", help="synthesize a train/valid corpus on disk")
    _add_config_flags(gen)

    train = commands.add_parser("train", help="train a model and write history.csv plus checkpoints")
    _add_config_flags(train)

    evaluate = commands.add_parser("eval", help="score a checkpoint on a corpus")
    evaluate.add_argument("--checkpoint", required=True)
    evaluate.add_argument("--corpus", required=True)
    evaluate.add_argument("--mapping", default=None, help="mapping file or asset name, e.g. timit_61_39")
    evaluate.add_argument("--out", default=None, help="directory for score.json")

    check = commands.add_parser("grad-check", help="compare analytic and finite-difference gradients")
    _add_config_flags(check)
    return parser


def _service(args) -> ExperimentService:
    config = load_experiment_config(args.config, seed=args.seed, preset=args.preset, output_dir=args.out)
    return ExperimentService(config)


def run(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "gen-corpus":
            summary = _service(args).gen_corpus()
            print(json.dumps(summary, indent=2, sort_keys=True))
        elif args.command == "train":
            result = _service(args).train()
            last = result.history.records[-1]
            print(f"{len(result.history)} epochs, {result.updates} updates; final valid PER {last.valid_per:.2f}")
            print(f"history: {result.curves}")
            print(f"checkpoint: {result.checkpoint}")
        elif args.command == "eval":
            reports = evaluate_checkpoint(args.checkpoint, args.corpus, mapping=args.mapping, out_dir=args.out)
            payload = {name: report.model_dump() if report else None for name, report in reports.items()}
            print(json.dumps({name: (p["per"] if p else None) for name, p in payload.items()}, sort_keys=True))
        else:
            report = _service(args).grad_check()
            for name, err in sorted(report.errors.items()):
                print(f"{'ok  ' if err <= report.tolerance else 'FAIL'} {name}: {err:.3e}")
            print(f"{'PASSED' if report.passed else 'FAILED'}: max relative error {report.max_error:.3e}")
            if not report.passed:
                return 1
    except AvseError as e:
        logger.error(f"{args.command} failed: {e}")
        return e.exit_code
    return 0


def main() -> None:
    configure_logging()
    sys.exit(run())


if __name__ == "__main__":
    main()
