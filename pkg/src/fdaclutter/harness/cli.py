"""Command-line entry point: ``fdaclutter {propagation|structure|consequence|all}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from .config import ConfigError, ExperimentConfig, load_config
from .report import emit_report
from .suites import SUITES

log = logging.getLogger("fdaclutter")


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fdaclutter", description="Run the frequency-diverse clutter experiment suites.")
    p.add_argument("suite", choices=sorted(SUITES) + ["all"])
    p.add_argument("--config", type=Path, help="JSON experiment config (schema_version required)")
    p.add_argument("--seed", type=_u64, help="master seed override")
    p.add_argument("--out", type=Path, default=Path("results"), help="output directory")
    p.add_argument("--trials", type=_positive, help="Monte Carlo trials override")
    p.add_argument("--format", choices=("csv", "markdown"), default="csv")
    p.add_argument("--threads", type=_positive, default=1, help="worker threads (affects wall time only)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _error_summary(suite: str, exc: BaseException) -> str:
    return json.dumps({"status": "error", "suite": suite, "error": type(exc).__name__, "message": str(exc)})


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        overrides = {"master_seed": args.seed, "trials": args.trials}
        if args.trials is not None:
            overrides["split"] = args.trials // 2
        cfg = cfg.with_overrides(**overrides)
    except (ConfigError, TypeError, ValueError) as exc:
        print(_error_summary("config", exc), file=sys.stderr)
        return 2

    names = sorted(SUITES) if args.suite == "all" else [args.suite]
    for name in names:
        t0 = time.perf_counter()
        try:
            result = SUITES[name](cfg, threads=args.threads)
            emit_report(result, args.out, args.format)
        except Exception as exc:  # suite-level failure: report and exit nonzero
            print(_error_summary(name, exc), file=sys.stderr)
            return 1
        log.info("%s finished in %.1f s (digest %s)", name, time.perf_counter() - t0, cfg.digest)
    return 0


if __name__ == "__main__":
    sys.exit(main())
