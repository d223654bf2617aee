"""Per-instance quantities, mechanism quadrants and population tables."""

from __future__ import annotations

import csv
import os
from collections import Counter
from dataclasses import asdict, dataclass, fields

import numpy as np

from tearfit.constants import DEFAULT_CONSTANTS, PhysicalConstants, TrialScales
from tearfit.fitting import FitResult, HierarchyResult

MECHANISMS = ("evap", "flow", "mixed", "gtf")
DISCOMFORT_MOSM = 450.0
MIN_SUBJECT_INSTANCES = 20


@dataclass(frozen=True)
class MechanismThresholds:
    v_um_per_min: float = 2.0
    b1_per_s: float = 0.038

    def __post_init__(self):
        if not self.v_um_per_min > 0:
            raise ValueError("evaporation threshold must be positive")


def classify(v_um_per_min: float, b1_per_s: float,
             thresholds: MechanismThresholds = MechanismThresholds()) -> str:
    """Quadrant of (v', b1'); values on a threshold count as high."""
    high_v = v_um_per_min >= thresholds.v_um_per_min
    high_b = b1_per_s >= thresholds.b1_per_s
    if high_v:
        return "mixed" if high_b else "evap"
    return "flow" if high_b else "gtf"


def median_flow_threshold(b1_values) -> float:
    vals = np.asarray(list(b1_values), dtype=float)
    if vals.size == 0:
        raise ValueError("median of an empty population")
    return float(np.median(vals))


def final_osmolarity(fit: FitResult, constants: PhysicalConstants = DEFAULT_CONSTANTS):
    """``(c_e, c_e in mOsM, truncated)`` at the end of the fitted trajectory."""
    c_e = float(fit.trajectory.c[-1])
    return c_e, constants.c0_mOsM * c_e, bool(fit.trajectory.terminated)


def mean_thinning_rate(fit: FitResult, scales: TrialScales) -> float:
    """Average -dh'/dt' over the window, um/min."""
    h_end = float(fit.trajectory.h[-1])
    return scales.h0_um * (1.0 - h_end) / scales.ts_s * 60.0


@dataclass
class InstanceSummary:
    subject_id: str
    trial_id: str
    roi_id: str
    h0_um: float
    f0_percent: float
    ts_s: float
    v_um_per_min: float
    b1_per_s: float
    b2_per_s: float
    c_e_nondim: float
    c_e_mOsM: float
    h_rel_nondim: float
    thinning_rate_um_per_min: float
    mechanism: str
    discomfort: bool
    truncated: bool = False
    roi_x: float | None = None
    roi_y: float | None = None

    @property
    def key(self) -> tuple:
        return (self.subject_id, self.trial_id, self.roi_id)


def summarize_instance(hier: HierarchyResult, scales: TrialScales, meta,
                       thresholds: MechanismThresholds = MechanismThresholds(),
                       constants: PhysicalConstants = DEFAULT_CONSTANTS) -> InstanceSummary:
    """Model-D quantities of one fitted instance; ``meta`` is a ``SeriesMeta``."""
    fit = hier.fits["D"]
    c_e, c_e_mOsM, truncated = final_osmolarity(fit, constants)
    return InstanceSummary(
        subject_id=str(meta.subject_id), trial_id=str(meta.trial_id), roi_id=str(meta.roi_id),
        h0_um=scales.h0_um, f0_percent=scales.f0_percent(constants), ts_s=scales.ts_s,
        v_um_per_min=fit.dim.v_um_per_min, b1_per_s=fit.dim.b1_per_s, b2_per_s=fit.dim.b2_per_s,
        c_e_nondim=c_e, c_e_mOsM=c_e_mOsM, h_rel_nondim=float(fit.trajectory.h[-1]),
        thinning_rate_um_per_min=mean_thinning_rate(fit, scales),
        mechanism=classify(fit.dim.v_um_per_min, fit.dim.b1_per_s, thresholds),
        discomfort=c_e_mOsM > DISCOMFORT_MOSM, truncated=truncated,
        roi_x=meta.roi_x, roi_y=meta.roi_y)


def reclassify(instances, thresholds: MechanismThresholds) -> list:
    out = []
    for inst in instances:
        d = asdict(inst)
        d["mechanism"] = classify(inst.v_um_per_min, inst.b1_per_s, thresholds)
        out.append(InstanceSummary(**d))
    return out


@dataclass
class PopulationSummary:
    per_subject: dict
    totals: dict
    excluded_subjects: list

    @property
    def n(self) -> int:
        return self.totals["total"]


def tabulate(instances) -> PopulationSummary:
    """Mechanism counts per subject and overall.

    Subjects with fewer than 20 instances are listed as excluded from
    subject-level analysis; they still count in the totals.
    """
    per_subject = {}
    for inst in instances:
        row = per_subject.setdefault(inst.subject_id, Counter())
        row[inst.mechanism] += 1
    table = {}
    for sid, cnt in per_subject.items():
        table[sid] = {m: cnt.get(m, 0) for m in MECHANISMS}
        table[sid]["total"] = sum(cnt.values())
    totals = {m: sum(r[m] for r in table.values()) for m in MECHANISMS}
    totals["total"] = sum(totals.values())
    excluded = sorted(s for s, r in table.items() if r["total"] < MIN_SUBJECT_INSTANCES)
    return PopulationSummary(per_subject=table, totals=totals, excluded_subjects=excluded)


def _subject_order(table: dict) -> list:
    # descending instance count, ties by subject id
    return sorted(table, key=lambda s: (-table[s]["total"], s))


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    return str(value)


SCATTER_FIELDS = [f.name for f in fields(InstanceSummary)]


def _atomic_write_rows(path, header, rows):
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    os.replace(tmp, path)


def histogram_rows(instances, bins: int = 30):
    quantities = ["v_um_per_min", "b1_per_s", "c_e_mOsM", "h0_um", "f0_percent",
                  "thinning_rate_um_per_min", "h_rel_nondim"]
    rows = []
    for q in quantities:
        vals = np.array([getattr(i, q) for i in instances], dtype=float)
        if vals.size == 0:
            continue
        counts, edges = np.histogram(vals, bins=bins)
        for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
            rows.append([q, repr(float(lo)), repr(float(hi)), int(c)])
    return rows


def emit_plot_data(instances, outdir, bins: int = 30) -> dict:
    """Write mechanism counts, per-instance scatter data and histograms as CSV.

    Returns the paths written. Rows are ordered by (subject, trial, roi) so
    the files depend only on the set of instances.
    """
    os.makedirs(outdir, exist_ok=True)
    instances = sorted(instances, key=lambda i: i.key)
    summary = tabulate(instances)
    paths = {k: os.path.join(outdir, f"{k}.csv") for k in ("mechanism_counts", "scatter", "histograms")}

    count_rows = []
    for sid in _subject_order(summary.per_subject):
        r = summary.per_subject[sid]
        count_rows.append([sid] + [r[m] for m in MECHANISMS]
                          + [r["total"], int(sid in summary.excluded_subjects)])
    t = summary.totals
    count_rows.append(["all"] + [t[m] for m in MECHANISMS] + [t["total"], 0])
    _atomic_write_rows(paths["mechanism_counts"],
                       ["subject"] + list(MECHANISMS) + ["total", "excluded"], count_rows)

    _atomic_write_rows(paths["scatter"], SCATTER_FIELDS,
                       [[_fmt(getattr(i, f)) for f in SCATTER_FIELDS] for i in instances])
    _atomic_write_rows(paths["histograms"], ["quantity", "bin_lo", "bin_hi", "count"],
                       histogram_rows(instances, bins))
    return paths


def read_scatter(path) -> list:
    """Inverse of the scatter table written by :func:`emit_plot_data`."""
    types = {f.name: f.type for f in fields(InstanceSummary)}
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            kw = {}
            for name, raw in row.items():
                ty = str(types[name])
                if ty == "str":
                    kw[name] = raw
                elif ty == "bool":
                    kw[name] = raw == "1"
                elif raw == "":
                    kw[name] = None
                else:
                    kw[name] = float(raw)
            out.append(InstanceSummary(**kw))
    return out


def read_counts(path) -> dict:
    with open(path, newline="") as fh:
        return {row["subject"]: {k: int(v) for k, v in row.items() if k != "subject"}
                for row in csv.DictReader(fh)}
