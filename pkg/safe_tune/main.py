"""
Command-line entry point: ``python -m safe_tune {train,profile,analyze,report}``.

Exit codes: 0 success, 1 configuration or dataset error, 2 numeric/engine/contract
failure, 3 IO or checkpoint failure, 4 unexpected internal error.
"""
import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from pythonjsonlogger import jsonlogger

from safe_tune.exceptions import SafeTuneError
from safe_tune.models import load_run_config
from safe_tune.pipeline import ANALYSES, analyze_run, compare_runs, profile_adapters, train_run

logger = logging.getLogger("safe_tune")

EXIT_OK = 0
EXIT_IO = 3
EXIT_INTERNAL = 4


def setup_logging() -> None:
    """One stderr handler on the package logger; JSON lines unless SAFE_TUNE_LOG_FORMAT=text."""
    handler = logging.StreamHandler(sys.stderr)
    if os.getenv("SAFE_TUNE_LOG_FORMAT", "json").lower() == "text":
        handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    else:
        handler.setFormatter(jsonlogger.JsonFormatter("%(levelname)s %(name)s %(message)s"))
    logger.handlers[:] = [handler]
    logger.setLevel(os.getenv("SAFE_TUNE_LOG_LEVEL", "INFO").upper())
    logger.propagate = False


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    overrides: Dict[str, Any] = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "policy", None) is not None:
        overrides["schedule.policy"] = args.policy
    if getattr(args, "out", None) is not None:
        overrides["out_dir"] = args.out
    return overrides


def cmd_train(args: argparse.Namespace) -> int:
    config = load_run_config(args.config, _overrides(args))
    result = train_run(config)
    summary = result.summary
    print(f"run: {result.run_dir}")
    print(f"val_accuracy: {summary.final_val_accuracy:.4f}")
    print(f"frozen adapters: {summary.frozen_adapters} (warm-up epoch {summary.warmup_epoch})")
    print(f"activation reduction: final {summary.activation_reduction.final}, "
          f"integrated {summary.activation_reduction.integrated}, "
          f"after warm-up {summary.activation_reduction.after_warmup}")
    print(f"backward FLOP reduction: integrated {summary.backward_flops_reduction.integrated}, "
          f"after warm-up {summary.backward_flops_reduction.after_warmup}")
    return EXIT_OK


def cmd_profile(args: argparse.Namespace) -> int:
    config = load_run_config(args.config, _overrides(args))
    path = profile_adapters(config, config.out_dir)
    print(f"profile: {path}")
    return EXIT_OK


def cmd_analyze(args: argparse.Namespace) -> int:
    results = analyze_run(args.run_dir, args.which)
    for key in ("landscape_center", "penalty"):
        if key in results:
            print(f"{key}: {results[key]}")
    if "spectrum" in results:
        print(f"eigenvalues: {results['spectrum']['eigenvalues']}")
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    out = args.out or str(Path(args.run_dirs[0]).parent / "report.csv")
    print(f"report: {compare_runs(args.run_dirs, out)}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="safe_tune", description="Selective adapter freezing runs")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, func, help_text in (("train", cmd_train, "train one run"),
                                  ("profile", cmd_profile, "train one single-adapter variant per layer")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="YAML run config")
        p.add_argument("--out", default=None, help="output directory (overrides out_dir)")
        p.add_argument("--seed", type=int, default=None, help="overrides seed")
        p.add_argument("--policy", choices=["safe", "none", "random"], default=None,
                       help="overrides schedule.policy")
        p.set_defaults(func=func)

    p = sub.add_parser("analyze", help="post-hoc analysis of a finished run")
    p.add_argument("run_dir")
    p.add_argument("--which", choices=list(ANALYSES) + ["all"], default="all")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("report", help="compare finished runs")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--out", default=None, help="CSV path (default: report.csv next to the first run)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging()
    try:
        return args.func(args)
    except SafeTuneError as e:
        logger.error(f"{type(e).__name__}: {e}")
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        logger.error(f"IO failure: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except Exception as e:
        logger.exception(f"Internal error: {type(e).__name__}: {e}")
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL
