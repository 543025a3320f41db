"""Command-line front end.

Subcommands:

* ``run``          simulate one scenario, write the trace, the JSON
                   summary and the report figures
* ``metrics``      score a stored trace and print the metrics as JSON
* ``sweep``        run a weight grid in parallel and render the safety
                   scatter
* ``fit-variance`` fit the driver-variance curve from a trajectory
                   dataset and store it as JSON
* ``validate``     run the invariant suite over a stored trace
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import yaml

from .config import default_scenario, load_grid, load_scenario
from .harness import pareto_sweep, run_closed_loop, validate_trace
from .metrics import compute_metrics
from .plots import plot_pareto, render_run_figures
from .traceio import (read_trace_csv, read_trace_json, write_summary,
                      write_trace_csv, write_trace_json)
from .uncertainty import fit_bins, fit_variance_curve, ingest_tracks, save_curve

log = logging.getLogger(__name__)

_SWEEP_METRIC_COLS = ["min_headway_time", "min_lateral_distance",
                      "rms_heading_deg", "rms_lateral_accel",
                      "lane_occupancy_time", "collision",
                      "completed_overtake"]


def _load_config(path, seed=None):
    overrides = {"seed": int(seed)} if seed is not None else None
    if path is None:
        return default_scenario(overrides)
    return load_scenario(path, overrides)


def _read_trace(path):
    path = Path(path)
    if path.suffix.lower() == ".json":
        return read_trace_json(path)
    return read_trace_csv(path)


def _cmd_run(args) -> int:
    cfg = _load_config(args.config, args.seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    trace = run_closed_loop(cfg, n_steps=args.steps)
    scored = compute_metrics(trace, geom=cfg.geom, wheelbase=cfg.sim.l)

    if args.format == "json":
        trace_path = write_trace_json(trace, out_dir / "trace.json")
    else:
        trace_path = write_trace_csv(trace, out_dir / "trace.csv")
    summary_path = write_summary(trace, scored.as_dict(),
                                 out_dir / "summary.json")
    written = [trace_path, summary_path]
    if not args.no_figures and trace.records:
        written += render_run_figures(trace, cfg.geom, cfg.limits, out_dir)

    print(json.dumps(scored.as_dict(), indent=2))
    for path in written:
        print(f"wrote {path}")
    if trace.aborted:
        print(f"run ABORTED: {trace.abort_reason}", file=sys.stderr)
        return 2
    return 0


def _cmd_metrics(args) -> int:
    trace = _read_trace(args.trace)
    scored = compute_metrics(trace)
    print(json.dumps(scored.as_dict(), indent=2))
    return 0


def _cmd_sweep(args) -> int:
    if args.config is None:
        doc, base_dir = {}, Path.cwd()
    else:
        config_path = Path(args.config)
        with open(config_path) as fh:
            doc = yaml.safe_load(fh) or {}
        base_dir = config_path.parent
    grid = load_grid(args.grid)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    results = pareto_sweep(doc, grid, jobs=args.jobs, base_dir=base_dir,
                           n_steps=args.steps)

    keys = sorted({key for point in grid for key in point})
    csv_path = out_dir / "sweep.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(keys + _SWEEP_METRIC_COLS + ["critical", "error"])
        for entry in results:
            scored = entry.get("metrics") or {}
            row = [entry["overrides"].get(k, "") for k in keys]
            row += [scored.get(c, "") for c in _SWEEP_METRIC_COLS]
            row += [entry.get("critical", ""), entry.get("error") or ""]
            writer.writerow(row)
    json_path = out_dir / "sweep.json"
    with open(json_path, "w") as fh:
        json.dump(results, fh, indent=2)
    figure_path = plot_pareto(results, out_dir / "pareto.png")

    n_fail = sum(1 for entry in results if entry.get("error"))
    n_crit = sum(1 for entry in results if entry.get("critical"))
    print(f"swept {len(results)} point(s): {n_crit} critical, "
          f"{n_fail} failed")
    for path in (csv_path, json_path, figure_path):
        print(f"wrote {path}")
    return 0


def _cmd_fit_variance(args) -> int:
    samples = ingest_tracks(args.tracks)
    bins = fit_bins(samples, bin_width=args.bin_width,
                    min_count=args.min_count)
    curve = fit_variance_curve(bins)
    out_path = Path(args.out)
    save_curve(curve, out_path)
    usable = [b for b in bins if not b.degenerate]
    print(f"fitted {len(samples[0])} samples into {len(usable)} bins; "
          f"region fits R^2 = {curve.meta.get('spline_r2', float('nan')):.3f}"
          f" / {curve.meta.get('exp_r2', float('nan')):.3f}")
    print(f"wrote {out_path}")
    return 0


def _cmd_validate(args) -> int:
    trace = _read_trace(args.trace)
    cfg = _load_config(args.config) if args.config else None
    problems = validate_trace(trace, cfg)
    if problems:
        for problem in problems:
            print(f"FAIL {problem}")
        return 1
    print(f"ok: {len(trace)} records, no invariant violations")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="overtake",
        description="closed-loop overtaking: simulate, score and sweep")
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="log at DEBUG level")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="simulate one scenario")
    run_p.add_argument("--config", help="scenario YAML (defaults built in)")
    run_p.add_argument("--out", default="out", help="output directory")
    run_p.add_argument("--seed", type=int, help="override the scenario seed")
    run_p.add_argument("--format", choices=("csv", "json"), default="csv",
                       help="trace file format")
    run_p.add_argument("--steps", type=int,
                       help="cap the number of control cycles")
    run_p.add_argument("--no-figures", action="store_true",
                       help="skip the report figures")
    run_p.set_defaults(func=_cmd_run)

    metrics_p = sub.add_parser("metrics", help="score a stored trace")
    metrics_p.add_argument("--trace", required=True,
                           help="trace file (.csv or .json)")
    metrics_p.set_defaults(func=_cmd_metrics)

    sweep_p = sub.add_parser("sweep", help="run a weight grid")
    sweep_p.add_argument("--config", help="base scenario YAML")
    sweep_p.add_argument("--grid", required=True,
                         help="grid YAML: points list or product axes")
    sweep_p.add_argument("--jobs", type=int, default=None,
                         help="worker processes (default: cpu count)")
    sweep_p.add_argument("--out", default="out", help="output directory")
    sweep_p.add_argument("--steps", type=int,
                         help="cap the cycles per point")
    sweep_p.set_defaults(func=_cmd_sweep)

    fit_p = sub.add_parser("fit-variance",
                           help="fit the driver-variance curve")
    fit_p.add_argument("--tracks", required=True,
                       help="trajectory dataset CSV")
    fit_p.add_argument("--out", default="curve.json",
                       help="where to store the fitted curve")
    fit_p.add_argument("--bin-width", type=float, default=0.1)
    fit_p.add_argument("--min-count", type=int, default=50)
    fit_p.set_defaults(func=_cmd_fit_variance)

    val_p = sub.add_parser("validate", help="invariant-check a trace")
    val_p.add_argument("--trace", required=True,
                       help="trace file (.csv or .json)")
    val_p.add_argument("--config",
                       help="scenario YAML for the bound checks")
    val_p.set_defaults(func=_cmd_validate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
