import argparse
import json
import sys
from typing import Dict, List, Optional, Text

from loguru import logger

from maulab import __description__, __version__, exceptions, loader, utils
from maulab.config import resolve_run_config
from maulab.models import PresetEnum
from maulab.pipeline import STAGES, Workspace, run_stage

STAGE_HELP = {
    "generate": "Generate the synthetic L1/L2 corpus.",
    "train-vq": "Train the frame to acoustic unit quantizer.",
    "encode": "Encode every split into acoustic unit sequences.",
    "train-detector": "Pre-train the masked unit detector on corrupted L1 units.",
    "finetune-corrector": "Fine-tune the detector into the unit corrector.",
    "detect": "Score phoneme errors of the L2 test split.",
    "correct": "Mask, refill and resynthesise the L2 test split.",
    "evaluate": "Write the detection and correction reports.",
    "report": "Render training curves and an attention heatmap as SVG.",
    "pipeline": "Run every stage in order.",
}


def add_common_arguments(parser: argparse.ArgumentParser):
    parser.add_argument("--config", dest="config", help="JSON or YAML config file")
    parser.add_argument("--seed", dest="seed", type=int, help="run seed")
    parser.add_argument(
        "--preset",
        dest="preset",
        choices=[p.value for p in PresetEnum],
        help="named preset, default desk",
    )
    parser.add_argument(
        "--out", dest="out", default=".", help="workspace directory, default current"
    )
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="dotted config override, e.g. detection.threshold=0.3",
    )
    parser.add_argument(
        "--log-level", dest="log_level", default="INFO", help="loguru level, default INFO"
    )


def init_parser(subparsers, stage: Text) -> argparse.ArgumentParser:
    sub_parser = subparsers.add_parser(stage, help=STAGE_HELP[stage])
    add_common_arguments(sub_parser)
    if stage == "report":
        sub_parser.add_argument(
            "--utt", dest="utt_id", help="utterance id, default first l2-test utterance"
        )
    sub_parser.set_defaults(command=stage)
    return sub_parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maulab", description=__description__)
    parser.add_argument(
        "-V", "--version", dest="version", action="store_true", help="show version"
    )
    subparsers = parser.add_subparsers(help="sub-command help")
    for stage in STAGES + ["pipeline"]:
        init_parser(subparsers, stage)
    return parser


def workspace_from_args(args: argparse.Namespace) -> Workspace:
    file_overrides = loader.load_config_file(args.config) if args.config else {}
    flag_overrides: Dict = {}
    for expression in args.overrides:
        flag_overrides = utils.deep_merge(flag_overrides, utils.parse_override(expression))
    if args.seed is not None:
        flag_overrides["seed"] = args.seed
    run_config = resolve_run_config(args.preset, file_overrides, flag_overrides)
    return Workspace(args.out, run_config)


def error_line(ex: Exception, stage: Optional[Text]) -> Text:
    payload = {"error": type(ex).__name__, "message": str(ex), "stage": stage}
    return "maulab-error: " + json.dumps(payload, sort_keys=True)


def main(argv: Optional[List[Text]] = None) -> int:
    """parse command line options and run the requested stage, returns exit status"""
    argv = sys.argv[1:] if argv is None else argv
    parser = build_parser()

    if not argv:
        parser.print_help()
        return 0

    args = parser.parse_args(argv)
    if args.version:
        print(f"{__version__}")
        return 0
    if not getattr(args, "command", None):
        parser.print_help()
        return 0

    utils.init_logger(args.log_level)
    stage = args.command
    try:
        ws = workspace_from_args(args)
        if stage == "pipeline":
            for stage in STAGES:
                run_stage(ws, stage)
        elif stage == "report":
            run_stage(ws, stage, utt_id=args.utt_id)
        else:
            run_stage(ws, stage)
    except (exceptions.MyBaseError, exceptions.MyBaseFailure) as ex:
        logger.error(f"{stage} failed: {ex}")
        sys.stderr.write(error_line(ex, stage) + "\n")
        return 1

    return 0


if __name__ == "__main__":
    sys.exit(main())
