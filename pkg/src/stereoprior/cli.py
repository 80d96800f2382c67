"""Command-line entry point: ``gen``, ``train``, ``eval`` and ``selftest``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import RunConfig

log = logging.getLogger("stereoprior")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_NONFINITE = 2


def _load_config(path: str | None) -> RunConfig:
    return RunConfig() if path is None else RunConfig.load(path)


def cmd_gen(args) -> int:
    from .synthdata import generate_dataset

    config = _load_config(args.config)
    seed = config.seed if args.seed is None else args.seed
    count = args.count if args.count is not None else config.data.train_count + config.val_count
    paths = generate_dataset(args.out, count, seed, config.data)
    log.info("wrote %d scenes to %s", len(paths), args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import NonFiniteLoss, run_train

    config = _load_config(args.config)
    try:
        result = run_train(config, data_dir=args.data, out=args.out)
    except NonFiniteLoss as exc:
        log.error("%s", exc)
        return EXIT_NONFINITE
    if args.history:
        Path(args.history).write_text(json.dumps(result.history, indent=1))
    log.info("checkpoint written to %s", args.out)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluate import run_eval

    result = run_eval(args.ckpt, args.data, report=args.report, dump_depth=args.dump_depth, split=args.split)
    summary = {k: result[k] for k in ("num_scenes", "epe_refined", "epe_prior", "monotone_fraction")}
    summary["a1"] = result["refined"]["a1"]
    summary["rmse"] = result["refined"]["rmse"]
    print(json.dumps(summary, indent=1))
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    ok = run_selftest(verbose=not args.quiet)
    return EXIT_OK if ok else EXIT_FAILURE


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stereoprior", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--config", help="run config JSON (data section is used)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, help="number of scenes (default: train_count + val_count)")
    p.add_argument("--seed", type=int, help="dataset seed (default: config seed)")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="run both training stages")
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--data", help="dataset directory (generated in memory when omitted)")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--history", help="optional JSON file for the per-epoch log")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", help="JSON report path")
    p.add_argument("--dump-depth", help="directory for PFM depth maps and PPM previews")
    p.add_argument("--split", choices=("all", "val"), default="all")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("selftest", help="run the built-in oracle checks")
    p.add_argument("-q", "--quiet", action="store_true")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
