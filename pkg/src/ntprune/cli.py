"""Command-line entry point: ``ntprune {pretrain,prune,slc,report,plot}``.

Exit status is 0 on success, 1 when a stage fails at run time and 2 for
usage or configuration errors.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import orchestrator as orch
from .config import ConfigError, ExperimentConfig

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ntprune", description="Non-transferable pruning experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="experiment config (JSON)")
            p.add_argument("--seed", type=int, default=None, help="override the config's global seed")
        p.add_argument("--out", default=None, help=f"output root (default ${orch.OUT_ENV} or ./runs)")
        return p

    common(sub.add_parser("pretrain", help="train the source classifier"))
    p = common(sub.add_parser("prune", help="prune the pretrained model"))
    p.add_argument("--method", choices=orch.METHODS, default="ntp")
    p = common(sub.add_parser("slc", help="score transferability against scratch training"))
    p.add_argument("--method", choices=orch.METHODS, default=None,
                   help="score this pruned model (default: the unpruned one)")
    p.add_argument("--scheme", choices=("ff", "lp"), default=None)
    p.add_argument("--revive-zeros", action="store_true", default=None,
                   help="let pruned weights move during fine-tuning")
    p.add_argument("--jobs", type=int, default=1)
    p = common(sub.add_parser("report", help="merge SLC reports into one table"), config=False)
    p.add_argument("runs", nargs="*", help="run directories (default: every run under --out)")
    p = common(sub.add_parser("plot", help="re-render SLC figures"))
    p.add_argument("--format", choices=("svg", "png"), default="svg")
    return parser


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    return cfg.with_seed(args.seed) if args.seed is not None else cfg


def run(args) -> object:
    out = Path(args.out) if args.out is not None else orch.default_out_root()
    if args.command == "report":
        runs = [Path(r) for r in args.runs] or sorted(p for p in out.glob("*") if (p / "config.json").exists())
        res = orch.cmd_report(runs, out / "report")
        sys.stdout.write(res["text"])
        return res
    cfg = _config(args)
    if args.command == "pretrain":
        res = orch.cmd_pretrain(cfg, out)
    elif args.command == "prune":
        res = orch.cmd_prune(cfg, args.method, out)
    elif args.command == "slc":
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        res = orch.cmd_slc(cfg, args.method, args.scheme, args.revive_zeros, args.jobs, out)
        res = {k: res[k] for k in ("label", "auc", "cache_hits")}
    else:
        res = {"figures": [str(p) for p in orch.cmd_plot(cfg, out, args.format)]}
    print(json.dumps({"run": str(orch.run_dir(cfg, out)), **res}, indent=2, sort_keys=True))
    return res


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run(args)
    except ConfigError as exc:
        print(f"ntprune: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (orch.PipelineError, OSError, ValueError, RuntimeError, FloatingPointError) as exc:
        print(f"ntprune: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
