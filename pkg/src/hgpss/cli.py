"""Command line entry point: ``hgpss {generate,run,compare,eval}``.

Exit codes: 0 success, 1 usage or configuration error, 2 inference divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .ep_frame import EPDivergedError
from .evaluation import compare_runs, default_threshold, metric_report
from .experiment import (
    VARIANTS,
    ConfigError,
    CSVFormatError,
    ExperimentConfig,
    generate_blob_sequence,
    ingest_csv_frames,
    run_comparison,
    run_experiment,
    write_matrix_csv,
)

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p):
    p.add_argument("--config", type=Path, help="JSON experiment config")
    p.add_argument("--seed-data", type=int)
    p.add_argument("--seed-sensing", type=int)
    p.add_argument("--seed-noise", type=int)
    p.add_argument("--seed-inference", type=int)
    p.add_argument("--ratio", type=float, help="measurement ratio K/N")
    p.add_argument("--threshold", type=float, help="support mask threshold")
    p.add_argument("--data-csv", type=Path, help="read ground-truth frames from CSV")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("-v", "--verbose", action="count", default=0)


def build_parser():
    parser = _Parser(prog="hgpss", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic blob sequence to CSV")
    _common(g)
    g.add_argument("--n", type=int)
    g.add_argument("--t-steps", type=int)
    g.add_argument("--num-blobs", type=int)
    g.add_argument("--blob-width", type=int)
    g.add_argument("--drift-std", type=float)
    g.add_argument("--amplitude-std", type=float)

    r = sub.add_parser("run", help="run one experiment")
    _common(r)
    r.add_argument("--variant", choices=VARIANTS)

    c = sub.add_parser("compare", help="paired-seed comparison of model variants")
    _common(c)
    c.add_argument("--seeds", type=int, default=10, help="number of paired seed sets")
    c.add_argument("--variants", nargs="+", choices=VARIANTS, default=list(VARIANTS))
    c.add_argument("--jobs", type=int, default=1)

    e = sub.add_parser("eval", help="metrics on existing beta / beta-hat CSV files")
    e.add_argument("--truth", type=Path, required=True)
    e.add_argument("--estimate", type=Path, action="append", required=True,
                   help="estimate CSV; repeat to compare several")
    e.add_argument("--label", action="append", help="label per --estimate")
    e.add_argument("--threshold", type=float, default=default_threshold(1.0))
    e.add_argument("--out", type=Path)
    e.add_argument("-v", "--verbose", action="count", default=0)
    return parser


def resolve_config(args) -> ExperimentConfig:
    """Defaults, then the config file, then command line flags."""
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    seeds = {k: getattr(args, f"seed_{k}") for k in ("data", "sensing", "noise", "inference")}
    seeds = {k: v for k, v in seeds.items() if v is not None}
    changes = {}
    if seeds:
        changes["seeds"] = seeds
    if args.ratio is not None:
        changes["measurement_ratio"] = args.ratio
    if args.threshold is not None:
        changes["threshold"] = args.threshold
    if args.out is not None:
        changes["output_dir"] = str(args.out)
    data = {}
    if args.data_csv is not None:
        data.update(source="csv", csv_path=str(args.data_csv))
    for name in ("n", "t_steps", "num_blobs", "blob_width", "drift_std", "amplitude_std"):
        value = getattr(args, name, None)
        if value is not None:
            data[name] = value
    if data:
        changes["data"] = data
    if getattr(args, "variant", None):
        changes["variant"] = args.variant
    try:
        return cfg.updated(**changes)
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from err


def _cmd_generate(args):
    cfg = resolve_config(args)
    frames = generate_blob_sequence(cfg.data.blob_spec(), cfg.seeds.data)
    out = args.out or Path("beta_true.csv")
    if out.suffix != ".csv":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "beta_true.csv"
    write_matrix_csv(out, frames)
    print(f"wrote {frames.shape[0]}x{frames.shape[1]} frames to {out}")
    return EXIT_OK


def _cmd_run(args):
    cfg = resolve_config(args)
    if cfg.output_dir is None:
        cfg = replace(cfg, output_dir=f"runs/{cfg.variant}")
    result = run_experiment(cfg)
    rep = result.report
    print(f"{rep.label}: NMSE={rep.nmse:.4f} F-measure={rep.f_measure:.4f} -> {cfg.output_dir}")
    return EXIT_OK


def _cmd_compare(args):
    cfg = resolve_config(args)
    out = cfg.output_dir or "runs/compare"
    table, summary = run_comparison(cfg, args.seeds, tuple(args.variants), out, args.jobs)
    print(table.to_text())
    for v, wins in summary.get("hierarchical_nmse_wins", {}).items():
        print(f"hierarchical NMSE <= {v} on {wins}/{args.seeds} seeds")
    return EXIT_OK


def _cmd_eval(args):
    truth = ingest_csv_frames(args.truth)
    labels = args.label or []
    if labels and len(labels) != len(args.estimate):
        raise ConfigError("give one --label per --estimate")
    reports = []
    for i, path in enumerate(args.estimate):
        label = labels[i] if labels else Path(path).stem
        reports.append(metric_report(label, truth, ingest_csv_frames(path), args.threshold))
    table = compare_runs(reports)
    print(table.to_text())
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "metrics.csv").write_text(table.to_csv(), encoding="utf-8")
        (args.out / "metrics.json").write_text(
            json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True) + "\n",
            encoding="utf-8")
    return EXIT_OK


COMMANDS = {"generate": _cmd_generate, "run": _cmd_run, "compare": _cmd_compare, "eval": _cmd_eval}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING if args.verbose == 0 else logging.INFO if args.verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except EPDivergedError as err:
        print(f"inference diverged: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, CSVFormatError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
