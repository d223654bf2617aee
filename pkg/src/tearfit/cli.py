"""Command-line entry point: ``tearfit {fit,batch,synth,sweep,report}``."""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from tearfit import __version__
from tearfit.analysis import (MECHANISMS, MechanismThresholds, classify, emit_plot_data,
                              median_flow_threshold, reclassify, summarize_instance,
                              tabulate)
from tearfit.constants import DEFAULT_CONSTANTS, TrialScales, derive_groups
from tearfit.fitting import FitFailedError, fit_hierarchy
from tearfit.io import (ConfigError, ReportSchemaError, RunConfig, SeriesParseError,
                        apply_settings, atomic_write_text, build_report, dumps_report,
                        load_config, read_report, read_series, summary_from_report, write_report,
                        write_series)
from tearfit.model import DimParams, SolverFailure
from tearfit.preprocess import MissingMetadataError, prepare
from tearfit.synth import SynthSpec, generate, planted_population, validate

EXIT_OK, EXIT_ERROR, EXIT_SCREENED = 0, 1, 2
STATUS_CODES = {"fitted": EXIT_OK, "error": EXIT_ERROR, "screened_out": EXIT_SCREENED}
BATCH_INDEX_SCHEMA = "tearfit.batch_index"
SWEEP_HEADER = ["v_threshold_um_per_min", "b1_threshold_per_s", *MECHANISMS, "total"]


# -- single-instance pipeline -----------------------------------------------------

def run_series(path, cfg: RunConfig) -> dict:
    """Run the whole pipeline on one series file; always returns a report."""
    path = Path(path)
    source = path.name
    try:
        series = read_series(path)
    except (SeriesParseError, MissingMetadataError, ValueError, OSError) as exc:
        return build_report(None, cfg, status="error", error=str(exc), source=source)
    try:
        screening, clean = prepare(series, cfg.preprocess)
        if clean is None:
            return build_report(series, cfg, status="screened_out", screening=screening,
                                source=source)
        meta = series.meta
        scales = TrialScales.from_percent(meta.h0_um, clean.ts_s, meta.f0_percent)
        groups = derive_groups(DEFAULT_CONSTANTS, scales)
        hier = fit_hierarchy(clean, scales, cfg.fit)
        summary = summarize_instance(hier, scales, meta, cfg.thresholds)
    except (FitFailedError, SolverFailure, ValueError) as exc:
        return build_report(series, cfg, status="error", error=f"{type(exc).__name__}: {exc}",
                            source=source)
    return build_report(series, cfg, status="fitted", screening=screening, clean=clean,
                        groups=groups, hierarchy=hier, summary=summary, source=source)


def _batch_worker(job):
    path, cfg = job
    return run_series(path, cfg)


def run_batch(directory, outdir, cfg: RunConfig, bins: int = 30) -> dict:
    """Fit every ``*.csv`` in ``directory``; write reports, summary tables and an index.

    Files are processed in sorted name order and results are reduced in that
    order, so every output is independent of discovery order and ``cfg.jobs``.
    """
    directory, outdir = Path(directory), Path(outdir)
    if not directory.is_dir():
        raise FileNotFoundError(f"not a directory: {directory}")
    files = sorted(directory.glob("*.csv"), key=lambda p: p.name)
    jobs = [(str(p), cfg) for p in files]
    if cfg.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            docs = list(pool.map(_batch_worker, jobs))
    else:
        docs = [_batch_worker(j) for j in jobs]

    summaries = [summary_from_report(d) for d in docs if d["status"] == "fitted"]
    thresholds = cfg.thresholds
    if cfg.median_threshold and summaries:
        b1 = median_flow_threshold(s.b1_per_s for s in summaries)
        thresholds = MechanismThresholds(thresholds.v_um_per_min, b1)
        summaries = reclassify(summaries, thresholds)
        by_key = {s.key: s for s in summaries}
        for d in docs:
            if d["status"] == "fitted":
                s = by_key[summary_from_report(d).key]
                d["summary"]["mechanism"] = s.mechanism

    for p, d in zip(files, docs):
        write_report(d, outdir / "reports" / f"{p.stem}.json")
    paths = emit_plot_data(summaries, outdir, bins)
    index = {
        "schema": BATCH_INDEX_SCHEMA, "schema_version": 1, "tool_version": __version__,
        "n_files": len(files),
        "fitted": [p.name for p, d in zip(files, docs) if d["status"] == "fitted"],
        "screened_out": [p.name for p, d in zip(files, docs) if d["status"] == "screened_out"],
        "failed": [{"file": p.name, "error": d["error"]}
                   for p, d in zip(files, docs) if d["status"] == "error"],
        "thresholds": {"v_um_per_min": thresholds.v_um_per_min,
                       "b1_per_s": thresholds.b1_per_s},
        "totals": tabulate(summaries).totals,
    }
    atomic_write_text(outdir / "batch_index.json", json.dumps(index, indent=2, sort_keys=True) + "\n")
    return {"index": index, "paths": paths, "reports": docs}


def load_batch_summaries(batch_dir) -> list:
    batch_dir = Path(batch_dir)
    reports = batch_dir / "reports"
    if not reports.is_dir():
        raise FileNotFoundError(f"no batch output in {batch_dir} (missing reports/)")
    out = []
    for p in sorted(reports.glob("*.json"), key=lambda p: p.name):
        s = summary_from_report(read_report(p))
        if s is not None:
            out.append(s)
    return out


def sweep_counts(instances, v_grid, b1_grid) -> list:
    """Mechanism counts for every threshold pair of the grid."""
    rows = []
    for vt in v_grid:
        for bt in b1_grid:
            th = MechanismThresholds(float(vt), float(bt))
            counts = {m: 0 for m in MECHANISMS}
            for inst in instances:
                counts[classify(inst.v_um_per_min, inst.b1_per_s, th)] += 1
            rows.append([float(vt), float(bt)] + [counts[m] for m in MECHANISMS]
                        + [len(instances)])
    return rows


def format_counts(summary) -> str:
    head = f"{'subject':<12}" + "".join(f"{m:>8}" for m in MECHANISMS) + f"{'total':>8}"
    lines = [head]
    order = sorted(summary.per_subject, key=lambda s: (-summary.per_subject[s]["total"], s))
    for sid in order + ["all"]:
        r = summary.totals if sid == "all" else summary.per_subject[sid]
        mark = "*" if sid in summary.excluded_subjects else ""
        lines.append(f"{sid + mark:<12}" + "".join(f"{r[m]:>8}" for m in MECHANISMS)
                     + f"{r['total']:>8}")
    if summary.excluded_subjects:
        lines.append("* fewer than 20 instances; excluded from subject-level analysis")
    return "\n".join(lines)


# -- argument parsing ----------------------------------------------------------------

def _grid(text: str) -> list:
    """``a,b,c`` or ``lo:hi:n`` (n evenly spaced values)."""
    if ":" in text:
        lo, hi, n = text.split(":")
        return [float(x) for x in np.linspace(float(lo), float(hi), int(n))]
    return [float(x) for x in text.split(",") if x.strip()]


def _global_parser() -> argparse.ArgumentParser:
    # SUPPRESS defaults let the flags appear before or after the subcommand
    g = argparse.ArgumentParser(add_help=False, allow_abbrev=False)
    s = argparse.SUPPRESS
    g.add_argument("--config", default=s, help="flat key = value settings file")
    g.add_argument("--seed", type=int, default=s)
    g.add_argument("--objective", choices=("trapezoid", "mean"), default=s)
    g.add_argument("--delta-sus", type=float, default=s)
    g.add_argument("--brighten-thresh", type=float, default=s)
    g.add_argument("--smooth-width", type=int, default=s)
    g.add_argument("--v-threshold", type=float, default=s, help="um/min")
    g.add_argument("--b1-threshold", type=float, default=s, help="1/s")
    g.add_argument("--jobs", type=int, default=s)
    g.add_argument("--median-threshold", action="store_true", default=s,
                   help="use the population median of b1' as the flow threshold")
    return g


def build_parser() -> argparse.ArgumentParser:
    g = _global_parser()
    # no abbreviations: synth's --v must not be read as a prefix of --v-threshold
    parser = argparse.ArgumentParser(prog="tearfit", parents=[g], allow_abbrev=False,
                                     description="Fit tear-film thinning models to intensity series.")
    parser.add_argument("--version", action="version", version=f"tearfit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub_kw = {"parents": [g], "allow_abbrev": False}

    p = sub.add_parser("fit", **sub_kw, help="fit one series")
    p.add_argument("series", help="series CSV (sidecar JSON alongside)")
    p.add_argument("--out", help="report path (default: stdout)")

    p = sub.add_parser("batch", **sub_kw, help="fit every series in a directory")
    p.add_argument("directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--bins", type=int, default=30)

    p = sub.add_parser("synth", **sub_kw, help="write synthetic series files")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--spec-file", help="JSON object or list of synthetic specs")
    p.add_argument("--planted", type=int, metavar="N",
                   help="N noiseless Model-D series per mechanism quadrant")
    p.add_argument("--kind", choices=("O", "F", "D"), default="D")
    p.add_argument("--v", type=float, default=10.0, help="v' um/min")
    p.add_argument("--a", type=float, default=0.0, help="a' 1/s")
    p.add_argument("--b1", type=float, default=0.0, help="b1' 1/s")
    p.add_argument("--b2", type=float, default=0.0, help="b2' 1/s")
    p.add_argument("--h0", type=float, default=3.0, help="um")
    p.add_argument("--ts", type=float, default=3.0, help="s")
    p.add_argument("--f0", type=float, default=0.2, help="percent")
    p.add_argument("--rate", type=float, default=30.0, help="Hz")
    p.add_argument("--noise", type=float, default=0.0, help="fraction of I(0)")
    p.add_argument("--tail", type=float, default=0.0, help="s recorded past --ts")
    p.add_argument("--name", default="synth")

    p = sub.add_parser("sweep", **sub_kw, help="threshold sensitivity of mechanism counts")
    p.add_argument("batch_dir")
    p.add_argument("--v-grid", type=_grid, help="um/min; a,b,c or lo:hi:n (default +-10%%)")
    p.add_argument("--b1-grid", type=_grid, help="1/s; a,b,c or lo:hi:n (default +-10%%)")
    p.add_argument("--out", help="CSV path (default: stdout)")

    p = sub.add_parser("report", **sub_kw, help="count table and plot data from batch output")
    p.add_argument("batch_dir")
    p.add_argument("--out", help="directory for CSVs (default: the batch directory)")
    p.add_argument("--bins", type=int, default=30)
    return parser


def resolve_config(args) -> RunConfig:
    settings = load_config(args.config) if getattr(args, "config", None) else {}
    for key in ("seed", "objective", "delta_sus", "brighten_thresh", "smooth_width",
                "v_threshold", "b1_threshold", "jobs", "median_threshold"):
        if hasattr(args, key):
            settings[key] = getattr(args, key)
    cfg = apply_settings(RunConfig(), settings)
    if cfg.jobs < 1:
        raise ConfigError("jobs must be at least 1")
    return cfg


# -- subcommands -------------------------------------------------------------------------

def cmd_fit(args, cfg: RunConfig) -> int:
    doc = run_series(args.series, cfg)
    if args.out:
        write_report(doc, args.out)
    else:
        sys.stdout.write(dumps_report(doc))
    if doc["status"] == "error":
        print(f"error: {doc['error']}", file=sys.stderr)
    elif doc["status"] == "screened_out":
        print(f"screened out: {', '.join(doc['screening']['reasons'])}", file=sys.stderr)
    return STATUS_CODES[doc["status"]]


def cmd_batch(args, cfg: RunConfig) -> int:
    result = run_batch(args.directory, args.out, cfg, args.bins)
    index = result["index"]
    for f in index["failed"]:
        print(f"failed: {f['file']}: {f['error']}", file=sys.stderr)
    print(f"{index['n_files']} files: {len(index['fitted'])} fitted, "
          f"{len(index['screened_out'])} screened out, {len(index['failed'])} failed")
    if index["n_files"] and len(index["failed"]) == index["n_files"]:
        return EXIT_ERROR
    return EXIT_OK


SPEC_KEYS = {"kind", "v_um_per_min", "a_per_s", "b1_per_s", "b2_per_s", "h0_um", "ts_s",
             "f0_percent", "rate_hz", "noise", "seed", "raw_scale", "quantize", "subject_id",
             "trial_id", "roi_id", "force_include", "name", "tail_s"}


def spec_from_dict(doc: dict, default_seed: int = 0) -> tuple[str, SynthSpec]:
    unknown = set(doc) - SPEC_KEYS
    if unknown:
        raise ValueError(f"unknown synthetic spec fields: {sorted(unknown)}")
    kind = doc.get("kind", "D")
    truth = DimParams(kind, float(doc.get("v_um_per_min", 0.0)), a_per_s=float(doc.get("a_per_s", 0.0)),
                      b1_per_s=float(doc.get("b1_per_s", 0.0)), b2_per_s=float(doc.get("b2_per_s", 0.0)))
    kw = {k: doc[k] for k in ("h0_um", "ts_s", "f0_percent", "rate_hz", "noise", "raw_scale",
                              "quantize", "force_include", "tail_s") if k in doc}
    for k in ("subject_id", "trial_id", "roi_id"):
        if k in doc:
            kw[k] = str(doc[k])
    spec = SynthSpec(truth, seed=int(doc.get("seed", default_seed)), **kw)
    name = str(doc.get("name", f"{spec.subject_id}_{spec.trial_id}_{spec.roi_id}"))
    return name, spec


def cmd_synth(args, cfg: RunConfig) -> int:
    seed = cfg.fit.seed
    named = []
    if args.spec_file:
        doc = json.loads(Path(args.spec_file).read_text())
        for d in doc if isinstance(doc, list) else [doc]:
            named.append(spec_from_dict(d, seed))
    elif args.planted:
        for s in planted_population(args.planted, seed=seed):
            named.append((f"{s.subject_id}_{s.trial_id}_{s.roi_id}", s))
    else:
        truth = DimParams(args.kind, args.v, a_per_s=args.a, b1_per_s=args.b1, b2_per_s=args.b2)
        named.append((args.name, SynthSpec(truth, h0_um=args.h0, ts_s=args.ts, f0_percent=args.f0,
                                           rate_hz=args.rate, noise=args.noise, seed=seed,
                                           tail_s=args.tail, subject_id=args.name)))
    for _, spec in named:
        validate(spec, cfg.fit.box)
    out = Path(args.out)
    for name, spec in named:
        write_series(generate(spec, cfg.fit.box, delta_sus=cfg.fit.delta_sus), out / f"{name}.csv")
    print(f"wrote {len(named)} series to {out}")
    return EXIT_OK


def cmd_sweep(args, cfg: RunConfig) -> int:
    instances = load_batch_summaries(args.batch_dir)
    v0, b0 = cfg.thresholds.v_um_per_min, cfg.thresholds.b1_per_s
    v_grid = args.v_grid or [0.9 * v0, v0, 1.1 * v0]
    b_grid = args.b1_grid or [0.9 * b0, b0, 1.1 * b0]
    rows = sweep_counts(instances, v_grid, b_grid)
    text = ",".join(SWEEP_HEADER) + "\n" + "".join(
        ",".join(repr(x) if isinstance(x, float) else str(x) for x in r) + "\n" for r in rows)
    if args.out:
        atomic_write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_report(args, cfg: RunConfig) -> int:
    instances = load_batch_summaries(args.batch_dir)
    thresholds = cfg.thresholds
    if cfg.median_threshold and instances:
        thresholds = MechanismThresholds(thresholds.v_um_per_min,
                                         median_flow_threshold(i.b1_per_s for i in instances))
    instances = reclassify(instances, thresholds)
    emit_plot_data(instances, args.out or args.batch_dir, args.bins)
    print(f"thresholds: v' = {thresholds.v_um_per_min:g} um/min, b1' = {thresholds.b1_per_s:g} 1/s")
    print(format_counts(tabulate(instances)))
    return EXIT_OK


COMMANDS = {"fit": cmd_fit, "batch": cmd_batch, "synth": cmd_synth, "sweep": cmd_sweep,
            "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, ReportSchemaError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
