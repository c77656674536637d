"""
Command line entry of the experiment runner

Run:
> python -m tal_scale_wizard.runner.cli protocol --config tal_scale_wizard/runner/reference_config.json --out out
"""
import sys
import asyncio
import argparse
import logging
from typing import List, Optional
from pydantic import ValidationError
from tal_scale_wizard.runner.experiment import ExperimentConfig, ExperimentRunner
from tal_scale_wizard.src.common import GenerationError, setup_logging

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

VERBS = ["gen-data", "train-base", "adapt", "evaluate", "diagnose", "protocol", "ablate-alpha", "ablate-losses"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(message)


def alpha_list(text: str) -> List[float]:
    """
    "0,0.1,0.5" -> [0.0, 0.1, 0.5]
    """
    try:
        return [float(a) for a in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated numbers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tal-scale-wizard", description="Scale-robust weakly supervised action localization")
    common = _Parser(add_help=False)
    common.add_argument("--config", help="experiment JSON file; defaults apply when absent")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", help="output directory, TAL_OUT_DIR when absent")
    common.add_argument("--log-level", default=None)

    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)
    for verb in VERBS:
        p = sub.add_parser(verb, parents=[common])
        if verb in ("evaluate", "diagnose"):
            p.add_argument("--checkpoint", default="teacher", help="base, teacher, smd, or a checkpoint path")
            p.add_argument("--dataset", default="target-test", help="eg. target-test, source-test, long-test")
            p.add_argument("--tag", default=None)
        if verb == "diagnose":
            p.add_argument("--iou", type=float, default=None, help="tIoU of the error breakdown")
        if verb == "ablate-alpha":
            p.add_argument("--alphas", type=alpha_list, default=None, help="comma separated, eg. 0,0.1,0.5,1.0")
    return parser


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.override(seed=args.seed)
    if getattr(args, "iou", None) is not None:
        cfg = cfg.override(diagnose_iou=args.iou)
    return cfg


async def dispatch(runner: ExperimentRunner, args: argparse.Namespace) -> None:
    verb = args.verb
    if verb == "gen-data":
        await runner.cmd_gen_data()
    elif verb == "train-base":
        await runner.cmd_train_base()
    elif verb == "adapt":
        await runner.cmd_adapt()
    elif verb == "evaluate":
        await runner.cmd_evaluate(args.checkpoint, args.dataset, args.tag)
    elif verb == "diagnose":
        await runner.cmd_diagnose(args.checkpoint, args.dataset, args.tag)
    elif verb == "protocol":
        await runner.cmd_protocol()
    elif verb == "ablate-alpha":
        await runner.cmd_ablate_alpha(args.alphas)
    elif verb == "ablate-losses":
        await runner.cmd_ablate_losses()


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        setup_logging(args.log_level)
        cfg = load_config(args)
    except (UsageError, ValidationError, ValueError, FileNotFoundError) as e:
        logging.error(f"Usage error: {e}")
        return EXIT_USAGE

    runner = ExperimentRunner(cfg, args.out)
    try:
        asyncio.run(dispatch(runner, args))
    except (FileNotFoundError, GenerationError, ValidationError) as e:
        logging.error(f"{args.verb}: {e}")
        return EXIT_USAGE
    except Exception as e:
        logging.exception(f"{args.verb} failed: {e}")
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
