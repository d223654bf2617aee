"""Series files, fit reports and flat configuration files.

A series is a CSV with header ``t_seconds,intensity`` plus a sidecar JSON
``<stem>.json`` holding its metadata. Fit reports are schema-versioned JSON
documents whose numeric fields carry their unit in the name.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from tearfit import __version__
from tearfit.analysis import InstanceSummary, MechanismThresholds
from tearfit.fitting import BoxConstraints, FitConfig, HierarchyResult
from tearfit.preprocess import (CleanSeries, MissingMetadataError, PreprocessConfig, RawSeries,
                                ScreeningReport, SeriesMeta)

SERIES_HEADER = ("t_seconds", "intensity")
REPORT_SCHEMA = "tearfit.fit_report"
REPORT_SCHEMA_VERSION = 1
REQUIRED_META = ("subject_id", "trial_id", "roi_id", "f0_percent", "h0_um")
NONDIM_NAMES = {"O": ("v_nondim",), "F": ("v_nondim", "a_nondim"),
                "D": ("v_nondim", "b1_nondim", "b2_nondim")}


class SeriesParseError(ValueError):
    """Malformed series CSV or sidecar; the message names the file and line."""


class ConfigError(ValueError):
    pass


class ReportSchemaError(ValueError):
    pass


def atomic_write_text(path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    tmp.write_text(text)
    os.replace(tmp, path)


def sidecar_path(csv_path) -> Path:
    return Path(csv_path).with_suffix(".json")


# -- series files -------------------------------------------------------------

def _parse_float(text: str, where: str, what: str, line: str) -> float:
    try:
        val = float(text)
    except ValueError:
        raise SeriesParseError(f"{where}: cannot parse {what} {text!r} as a number: {line!r}") from None
    if not math.isfinite(val):
        raise SeriesParseError(f"{where}: {what} is not finite: {line!r}")
    return val


def read_series_csv(path) -> tuple[list, list]:
    path = Path(path)
    times, values = [], []
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    if not lines or tuple(c.strip() for c in lines[0].split(",")) != SERIES_HEADER:
        got = lines[0] if lines else ""
        raise SeriesParseError(f"{path}:1: expected header 't_seconds,intensity', got {got!r}")
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        where = f"{path}:{lineno}"
        cols = line.split(",")
        if len(cols) != 2:
            raise SeriesParseError(f"{where}: expected 2 columns, got {len(cols)}: {line!r}")
        t = _parse_float(cols[0].strip(), where, "t_seconds", line)
        y = _parse_float(cols[1].strip(), where, "intensity", line)
        if times and t <= times[-1]:
            raise SeriesParseError(f"{where}: t_seconds must be strictly increasing: {line!r}")
        if y < 0:
            raise SeriesParseError(f"{where}: intensity must be nonnegative: {line!r}")
        times.append(t)
        values.append(y)
    if len(times) < 2:
        raise SeriesParseError(f"{path}: a series needs at least two samples")
    return times, values


def read_meta(path) -> SeriesMeta:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise MissingMetadataError(f"{path}: metadata sidecar not found") from None
    except json.JSONDecodeError as exc:
        raise SeriesParseError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise SeriesParseError(f"{path}: metadata must be a JSON object")
    for name in REQUIRED_META:
        if doc.get(name) is None:
            raise MissingMetadataError(f"{path}: missing metadata field: {name}")
    for name in ("f0_percent", "h0_um"):
        if isinstance(doc[name], bool) or not isinstance(doc[name], (int, float)):
            raise SeriesParseError(f"{path}: metadata field {name} must be a number")
    return SeriesMeta(
        subject_id=str(doc["subject_id"]), trial_id=str(doc["trial_id"]), roi_id=str(doc["roi_id"]),
        f0_percent=float(doc["f0_percent"]), h0_um=float(doc["h0_um"]),
        roi_x=doc.get("roi_x"), roi_y=doc.get("roi_y"),
        force_include=bool(doc.get("force_include", False)),
        quality_flags=dict(doc.get("quality_flags", {})))


def read_series(csv_path) -> RawSeries:
    """Load a series CSV together with its sidecar metadata."""
    times, values = read_series_csv(csv_path)
    return RawSeries(times, values, read_meta(sidecar_path(csv_path)))


def meta_to_dict(meta: SeriesMeta) -> dict:
    doc = {name: getattr(meta, name) for name in REQUIRED_META}
    for name in ("roi_x", "roi_y"):
        if getattr(meta, name) is not None:
            doc[name] = getattr(meta, name)
    if meta.force_include:
        doc["force_include"] = True
    if meta.quality_flags:
        doc["quality_flags"] = dict(meta.quality_flags)
    return doc


def write_series(series: RawSeries, csv_path) -> tuple[Path, Path]:
    """Write CSV and sidecar; floats are written with ``repr`` so they read back exactly."""
    csv_path = Path(csv_path)
    rows = [",".join(SERIES_HEADER)]
    rows += [f"{float(t)!r},{float(y)!r}" for t, y in zip(series.times, series.values)]
    atomic_write_text(csv_path, "\n".join(rows) + "\n")
    side = sidecar_path(csv_path)
    atomic_write_text(side, json.dumps(meta_to_dict(series.meta), indent=2, sort_keys=True) + "\n")
    return csv_path, side


# -- configuration --------------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    """Everything a run depends on; the flat config file and the CLI flags map onto it."""

    fit: FitConfig = field(default_factory=FitConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    thresholds: MechanismThresholds = field(default_factory=MechanismThresholds)
    jobs: int = 1
    median_threshold: bool = False


# key -> (section, attribute, type); keys are the flag names with '-' as '_'
CONFIG_KEYS = {
    "seed": ("fit", "seed", int),
    "objective": ("fit", "objective", str),
    "delta_sus": ("fit", "delta_sus", float),
    "rtol": ("fit", "rtol", float),
    "atol": ("fit", "atol", float),
    "n_lhs": ("fit", "n_lhs", int),
    "restarts": ("fit", "restarts", int),
    "max_fev": ("fit", "max_fev", int),
    "crosscheck": ("fit", "crosscheck", bool),
    "brighten_thresh": ("preprocess", "brighten_thresh", float),
    "drop_ratio": ("preprocess", "drop_ratio", float),
    "smooth_width": ("preprocess", "smooth_width", int),
    "hampel_window": ("preprocess", "hampel_window", int),
    "hampel_nsigma": ("preprocess", "hampel_nsigma", float),
    "min_window_s": ("preprocess", "min_window_s", float),
    "fit_smoothed": ("preprocess", "fit_smoothed", bool),
    "trim_nsigma": ("preprocess", "trim_nsigma", float),
    "v_threshold": ("thresholds", "v_um_per_min", float),
    "b1_threshold": ("thresholds", "b1_per_s", float),
    "jobs": (None, "jobs", int),
    "median_threshold": (None, "median_threshold", bool),
}


def _coerce(key: str, text: str, ty):
    if ty is bool:
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean for {key}, got {text!r}")
    return ty(text.strip())


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """``key = value`` lines; ``#`` starts a comment. Returns typed values by key."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value': {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            out[key] = _coerce(key, value, CONFIG_KEYS[key][2])
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return out


def load_config(path) -> dict:
    return parse_config_text(Path(path).read_text(), str(path))


def apply_settings(base: RunConfig, settings: dict) -> RunConfig:
    """Overlay typed ``settings`` (config-file or flag values) on ``base``."""
    sections = {"fit": {}, "preprocess": {}, "thresholds": {}, None: {}}
    for key, value in settings.items():
        section, attr, _ = CONFIG_KEYS[key]
        sections[section][attr] = value
    try:
        return replace(base,
                       fit=replace(base.fit, **sections["fit"]),
                       preprocess=replace(base.preprocess, **sections["preprocess"]),
                       thresholds=replace(base.thresholds, **sections["thresholds"]),
                       **sections[None])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for key, (section, attr, _) in CONFIG_KEYS.items():
        obj = cfg if section is None else getattr(cfg, section)
        val = getattr(obj, attr)
        lines.append(f"{key} = {str(val).lower() if isinstance(val, bool) else val}")
    return "\n".join(lines) + "\n"


def config_echo(cfg: RunConfig) -> dict:
    """Settings that affect results; ``jobs`` is left out so outputs do not depend on it."""
    return _jsonable({"fit": asdict(cfg.fit), "preprocess": asdict(cfg.preprocess),
                      "thresholds": asdict(cfg.thresholds),
                      "median_threshold": cfg.median_threshold})


def run_config_from_echo(doc: dict) -> RunConfig:
    fit = dict(doc["fit"])
    box = {k: tuple(v) for k, v in fit.pop("box").items()}
    pre = dict(doc["preprocess"])
    pre["h0_range_um"] = tuple(pre["h0_range_um"])
    return RunConfig(fit=FitConfig(box=BoxConstraints(**box), **fit),
                     preprocess=PreprocessConfig(**pre),
                     thresholds=MechanismThresholds(**doc["thresholds"]),
                     median_threshold=doc["median_threshold"])


# -- fit reports ----------------------------------------------------------------

def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if hasattr(obj, "item") and not isinstance(obj, (str, bytes)):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def _fit_doc(fit) -> dict:
    traj = fit.trajectory
    dim = {name: value for name, value in zip(("v_um_per_min",) + {
        "O": (), "F": ("a_per_s",), "D": ("b1_per_s", "b2_per_s")}[fit.kind], fit.dim.vector())}
    return _jsonable({
        "kind": fit.kind,
        "dimensional": dim,
        "nondimensional": dict(zip(NONDIM_NAMES[fit.kind], fit.params.vector())),
        "residual_nondim": fit.residual,
        "at_bound": fit.at_bound,
        "penalized": fit.penalized,
        "converged": fit.converged,
        "start": fit.start,
        "nfev": fit.nfev,
        "terminated": traj.terminated,
        "termination_time_nondim": traj.termination_time,
        "termination_reason": traj.reason,
        "h_end_nondim": traj.h[-1],
        "c_end_nondim": traj.c[-1],
        "crosscheck": fit.crosscheck,
    })


def build_report(series: RawSeries | None, cfg: RunConfig, *, status: str,
                 screening: ScreeningReport | None = None, clean: CleanSeries | None = None,
                 groups=None, hierarchy: HierarchyResult | None = None,
                 summary: InstanceSummary | None = None, error: str | None = None,
                 source: str | None = None) -> dict:
    """JSON-ready report for one instance; ``status`` is a key of ``cli.STATUS_CODES``."""
    meta = None if series is None else series.meta
    doc = {
        "schema": REPORT_SCHEMA,
        "schema_version": REPORT_SCHEMA_VERSION,
        "tool_version": __version__,
        "status": status,
        "source": source,
        "meta": meta_to_dict(meta) if meta is not None else None,
        "screening": None if screening is None else {"accepted": screening.accepted,
                                                     "reasons": list(screening.reasons)},
        "window": None,
        "groups": None,
        "fits": None,
        "ordering_verified": None,
        "ordering_retries": None,
        "summary": None,
        "error": error,
        "seed": cfg.fit.seed,
        "config": config_echo(cfg),
    }
    if clean is not None:
        doc["window"] = {"start_s": clean.window[0], "end_s": clean.window[1],
                         "ts_s": clean.ts_s, "n_samples": int(clean.t.size)}
    if groups is not None:
        doc["groups"] = {"P_c_nondim": groups.P_c, "phi_nondim": groups.phi}
    if hierarchy is not None:
        doc["fits"] = {k: _fit_doc(f) for k, f in hierarchy.fits.items()}
        doc["ordering_verified"] = hierarchy.ordering_verified
        doc["ordering_retries"] = hierarchy.retries
    if summary is not None:
        doc["summary"] = asdict(summary)
    return _jsonable(doc)


def dumps_report(doc: dict) -> str:
    return json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n"


def loads_report(text: str, source: str = "<report>") -> dict:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ReportSchemaError(f"{source}:{exc.lineno}: invalid JSON: {exc.msg}") from None
    if not isinstance(doc, dict) or doc.get("schema") != REPORT_SCHEMA:
        raise ReportSchemaError(f"{source}: not a fit report")
    if doc.get("schema_version") != REPORT_SCHEMA_VERSION:
        raise ReportSchemaError(f"{source}: unsupported schema version {doc.get('schema_version')!r}")
    return doc


def write_report(doc: dict, path):
    atomic_write_text(path, dumps_report(doc))


def read_report(path) -> dict:
    return loads_report(Path(path).read_text(), str(path))


def summary_from_report(doc: dict) -> InstanceSummary | None:
    if doc.get("summary") is None:
        return None
    names = {f.name for f in fields(InstanceSummary)}
    return InstanceSummary(**{k: v for k, v in doc["summary"].items() if k in names})
