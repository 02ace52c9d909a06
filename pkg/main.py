# main.py - OLED T2-mapping toolkit command line

import argparse
import json
import logging
import sys
from typing import Any, Dict, List, Optional

from api.errors import OledError
from api.experiment_api import ExperimentAPI, load_config

logger = logging.getLogger(__name__)


def setup_logging(log_file: str = "oled.log", verbose: bool = False):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[
            logging.FileHandler(log_file),
            logging.StreamHandler()
        ],
        force=True,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="oled", description="OLED single-shot T2 mapping: simulation, "
                                                               "echo detachment and residual-network reconstruction")
    parser.add_argument("--log-file", default="oled.log")
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-dataset", help="simulate OLED / T2 training pairs")
    gen.add_argument("--config")
    gen.add_argument("--out", required=True)
    gen.add_argument("--seed", type=int)

    train = sub.add_parser("train", help="train the residual network on a dataset manifest")
    train.add_argument("--config")
    train.add_argument("--manifest", required=True)
    train.add_argument("--out", required=True)
    train.add_argument("--seed", type=int)

    recon = sub.add_parser("reconstruct", help="T2 map from one OLED image")
    recon.add_argument("--config")
    recon.add_argument("--input", required=True)
    recon.add_argument("--method", choices=["detach", "network"], required=True)
    recon.add_argument("--out", required=True)
    recon.add_argument("--checkpoint")

    sweep = sub.add_parser("sweep", help="depth or robustness sweep")
    sweep.add_argument("kind", choices=["depth", "robustness"])
    sweep.add_argument("--config")
    sweep.add_argument("--out", required=True)
    sweep.add_argument("--seed", type=int)

    evaluate = sub.add_parser("evaluate", help="error report of an estimate against a reference")
    evaluate.add_argument("--config")
    evaluate.add_argument("--estimate", required=True)
    evaluate.add_argument("--reference", required=True)
    evaluate.add_argument("--out", required=True)

    grad = sub.add_parser("gradcheck", help="finite-difference checks of every layer")
    grad.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    grad.add_argument("--out")
    return parser


def run_command(args: argparse.Namespace, experiment_api: ExperimentAPI) -> Dict[str, Any]:
    if args.command == "gradcheck":
        return experiment_api.gradcheck(args.seeds, args.out)

    try:
        cfg = load_config(args.config)
    except OledError as e:
        return {"status": "error", "error": str(e), "error_type": type(e).__name__, "message": "invalid configuration"}

    if args.command == "gen-dataset":
        return experiment_api.gen_dataset(cfg, args.out, seed=args.seed)
    if args.command == "train":
        return experiment_api.train(cfg, args.manifest, args.out, seed=args.seed)
    if args.command == "reconstruct":
        return experiment_api.reconstruct(cfg, args.input, args.method, args.out, args.checkpoint)
    if args.command == "sweep":
        return experiment_api.sweep(cfg, args.kind, args.out, seed=args.seed)
    if args.command == "evaluate":
        return experiment_api.evaluate(cfg, args.estimate, args.reference, args.out)
    raise ValueError(f"unknown command: {args.command}")


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_file, args.verbose)

    result = run_command(args, ExperimentAPI())
    if result.get("status") != "success":
        logger.error(f"{args.command} failed: {result.get('error')}")
        print(json.dumps({k: v for k, v in result.items() if k != "rows"}, default=str), file=sys.stderr)
        return 1
    summary = {k: v for k, v in result.items() if k != "rows"}
    print(json.dumps(summary, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
