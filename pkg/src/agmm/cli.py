"""Command line: ``agmm run``, ``agmm traces``, ``agmm kernels``."""

from __future__ import annotations

import argparse
import logging
import sys

from agmm.experiment import ConfigError, export_kernels, export_traces, load_config, run_experiment

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="agmm", description="Adversarial GMM experiments")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment sweep")
    run.add_argument("--config", required=True)
    run.add_argument("--out", default=None, help="output directory (overrides output_dir)")
    run.add_argument("--workers", type=int, default=None)
    run.add_argument("--only-cell", type=int, default=None, dest="only_cell")

    for name, what in (("traces", "iteration traces as CSV"), ("kernels", "critic kernels as JSON")):
        p = sub.add_parser(name, help=f"export a run's {what}")
        p.add_argument("--run", required=True, help="run id, e.g. dgp1_linear_g0.5_d1_r000")
        p.add_argument("--out", default=".", help="experiment output directory")
        p.add_argument("--dest", default=None, help="file to write (default: inside the run folder)")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "run":
        return _run(args)
    export = export_traces if args.command == "traces" else export_kernels
    try:
        path = export(args.out, args.run, args.dest)
    except KeyError as exc:
        print(f"error: {exc.args[0]}", file=sys.stderr)
        return EXIT_CONFIG
    print(path)
    return EXIT_OK


def _run(args) -> int:
    try:
        cfg = load_config(args.config)
        out = args.out or cfg.output_dir
        if out is None:
            raise ConfigError("output_dir", "no output directory: pass --out or set output_dir")
        if args.workers is not None and args.workers < 1:
            raise ConfigError("--workers", "must be >= 1")
        outcome = run_experiment(cfg, out, workers=args.workers, only_cell=args.only_cell)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for rid, err in outcome.errors:
        print(f"failed: {rid}: {err}", file=sys.stderr)
    print(f"{len(outcome.records)} records, {len(outcome.errors)} failed replicates -> {outcome.out_dir}")
    return EXIT_PARTIAL if outcome.errors else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
