"""Command-line entry point: ``python -m advtransfer <subcommand> --config run.yaml``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .errors import AdvTransferError

COMMANDS = ("train-models", "run-attacks", "run-defenses", "evaluate", "traceback", "sweep", "plot")
log = logging.getLogger("advtransfer")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="advtransfer", description="Transferable adversarial attack evaluation")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="experiment YAML (required except for plot)")
        s.add_argument("--seed", type=int, default=None, help="override the config seed")
        s.add_argument("--out", default="results", help="output directory")
        s.add_argument("--cache-dir", default=None, help="model/attack cache (default: $ADVTRANSFER_CACHE)")
        s.add_argument("--workers", type=int, default=1, help="parallel attack workers (1 = reproducible)")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def _summary(obj) -> str:
    return json.dumps(obj, indent=2, default=str)[:4000]


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "plot":
        from .plots import emit_plots

        paths = emit_plots(args.out)
        print(f"wrote {len(paths)} plots to {args.out}/plots")
        return 0
    if not args.config:
        print("error: --config is required", file=sys.stderr)
        return 2

    from .harness import ExperimentConfig, Pipeline

    try:
        cfg = ExperimentConfig.load(args.config)
    except (OSError, AdvTransferError, TypeError) as e:
        print(f"error: bad config: {e}", file=sys.stderr)
        return 2
    pipe = Pipeline(cfg, args.out, args.cache_dir, args.workers, args.seed, log=log.info)
    try:
        if args.command == "train-models":
            out = pipe.train_models()
        elif args.command == "run-attacks":
            out = {f"{k[0]}@{round(k[1] * 255)}#{k[2]}": str(len(b.labels)) for k, b in pipe.run_attacks().items()}
        elif args.command == "run-defenses":
            out = pipe.run_defenses()
        elif args.command == "evaluate":
            pipe.train_models()
            out = pipe.evaluate()
        elif args.command == "traceback":
            if not cfg.traceback.get("enabled", True):
                print("error: traceback disabled in config", file=sys.stderr)
                return 2
            out = pipe.traceback()
            out = {k: out[k] for k in ("accuracy", "category_accuracy", "chance", "svm")}
        else:
            out = pipe.sweep()
    except Exception as e:
        path = pipe.write_manifest("failed")
        print(f"error: {type(e).__name__}: {e}\nmanifest: {path}", file=sys.stderr)
        return 1
    path = pipe.write_manifest()
    print(_summary(out))
    print(f"manifest: {path}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
