import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from tearfit.analysis import MechanismThresholds
from tearfit.fitting import FitConfig
from tearfit.io import (CONFIG_KEYS, ConfigError, REPORT_SCHEMA, REPORT_SCHEMA_VERSION, RunConfig,
                        ReportSchemaError, SeriesParseError, apply_settings, build_report,
                        config_echo, dump_config, dumps_report, load_config, loads_report,
                        parse_config_text, read_meta, read_report, read_series, read_series_csv,
                        run_config_from_echo, sidecar_path, summary_from_report, write_report,
                        write_series)
from tearfit.preprocess import MissingMetadataError, RawSeries, ScreeningReport, SeriesMeta

META = SeriesMeta("S1", "T3", "R0", 0.2, 3.0)


def _write_csv(path, body, meta=None):
    path.write_text(body)
    if meta is not None:
        sidecar_path(path).write_text(json.dumps(meta))
    return path


# -- series files ---------------------------------------------------------------

finite = st.floats(0, 1e6, allow_nan=False, allow_infinity=False)


@given(values=st.lists(finite, min_size=2, max_size=40))
def test_series_round_trip_is_exact(values, tmp_path_factory):
    d = tmp_path_factory.mktemp("rt")
    times = np.cumsum(np.full(len(values), 0.1)).tolist()
    meta = SeriesMeta("S1", "T1", "R1", 0.2, 3.0, roi_x=1.5, roi_y=None, force_include=True,
                      quality_flags={"synth_truncated": False})
    write_series(RawSeries(times, values, meta), d / "a.csv")
    back = read_series(d / "a.csv")
    assert back.times.tolist() == times
    assert back.values.tolist() == [float(v) for v in values]
    assert back.meta == meta


def test_sidecar_path():
    assert str(sidecar_path("dir/x.csv")) == "dir/x.json"


@pytest.mark.parametrize("body, lineno, fragment", [
    ("time,intensity\n0,1\n", 1, "expected header"),
    ("t_seconds,intensity\n0,1\n1,2,3\n", 3, "expected 2 columns"),
    ("t_seconds,intensity\n0,1\n1,abc\n", 3, "cannot parse intensity"),
    ("t_seconds,intensity\n0,1\nnan,2\n", 3, "t_seconds is not finite"),
    ("t_seconds,intensity\n0,1\n1,inf\n", 3, "intensity is not finite"),
    ("t_seconds,intensity\n0,1\n0,2\n", 3, "strictly increasing"),
    ("t_seconds,intensity\n0,1\n1,-2\n", 3, "nonnegative"),
])
def test_csv_errors_carry_line_context(tmp_path, body, lineno, fragment):
    path = _write_csv(tmp_path / "bad.csv", body)
    with pytest.raises(SeriesParseError) as exc:
        read_series_csv(path)
    assert f"bad.csv:{lineno}:" in str(exc.value)
    assert fragment in str(exc.value)


def test_csv_blank_lines_skipped_and_too_short(tmp_path):
    t, y = read_series_csv(_write_csv(tmp_path / "a.csv", "t_seconds,intensity\n0,5\n\n1,4\n"))
    assert (t, y) == ([0.0, 1.0], [5.0, 4.0])
    with pytest.raises(SeriesParseError, match="at least two"):
        read_series_csv(_write_csv(tmp_path / "b.csv", "t_seconds,intensity\n0,5\n"))


@pytest.mark.parametrize("missing", ["subject_id", "trial_id", "roi_id", "f0_percent", "h0_um"])
def test_missing_metadata_field_is_named(tmp_path, missing):
    meta = {"subject_id": "S", "trial_id": "T", "roi_id": "R", "f0_percent": 0.2, "h0_um": 3.0}
    del meta[missing]
    path = _write_csv(tmp_path / "a.csv", "t_seconds,intensity\n0,1\n1,0.5\n", meta)
    with pytest.raises(MissingMetadataError, match=f"missing metadata field: {missing}"):
        read_series(path)


def test_sidecar_missing_malformed_and_mistyped(tmp_path):
    path = _write_csv(tmp_path / "a.csv", "t_seconds,intensity\n0,1\n1,0.5\n")
    with pytest.raises(MissingMetadataError, match="not found"):
        read_series(path)
    sidecar_path(path).write_text('{"subject_id": "S",\n "trial_id": }')
    with pytest.raises(SeriesParseError, match=r"a.json:2: invalid JSON"):
        read_meta(sidecar_path(path))
    sidecar_path(path).write_text(json.dumps(
        {"subject_id": "S", "trial_id": "T", "roi_id": "R", "f0_percent": "0.2", "h0_um": 3}))
    with pytest.raises(SeriesParseError, match="f0_percent must be a number"):
        read_meta(sidecar_path(path))


# -- configuration ----------------------------------------------------------------

def test_config_parse_and_apply():
    text = """
    # thresholds for a sensitivity run
    v_threshold = 2.5
    b1-threshold = 0.05   # dashes are accepted
    objective = mean
    crosscheck = yes
    seed = 9
    smooth_width = 7
    jobs = 4
    """
    settings = parse_config_text(text)
    assert settings == {"v_threshold": 2.5, "b1_threshold": 0.05, "objective": "mean",
                        "crosscheck": True, "seed": 9, "smooth_width": 7, "jobs": 4}
    cfg = apply_settings(RunConfig(), settings)
    assert cfg.thresholds == MechanismThresholds(2.5, 0.05)
    assert cfg.fit.objective == "mean" and cfg.fit.crosscheck and cfg.fit.seed == 9
    assert cfg.preprocess.smooth_width == 7 and cfg.jobs == 4


@pytest.mark.parametrize("text, fragment", [
    ("seed = 1\nbogus = 2\n", "<config>:2: unknown key 'bogus'"),
    ("seed = one\n", "<config>:1:"),
    ("crosscheck = maybe\n", "expected a boolean"),
    ("just words\n", "expected 'key = value'"),
])
def test_config_errors(text, fragment):
    with pytest.raises(ConfigError) as exc:
        parse_config_text(text)
    assert fragment in str(exc.value)


def test_config_invalid_value_rejected_on_apply():
    with pytest.raises(ConfigError, match="objective"):
        apply_settings(RunConfig(), {"objective": "median"})
    with pytest.raises(ConfigError, match="delta_sus"):
        apply_settings(RunConfig(), {"delta_sus": 1.5})


def test_config_dump_round_trip(tmp_path):
    cfg = apply_settings(RunConfig(), {"seed": 3, "v_threshold": 1.5, "fit_smoothed": True,
                                       "median_threshold": True, "jobs": 2})
    path = tmp_path / "run.cfg"
    path.write_text(dump_config(cfg))
    settings = load_config(path)
    assert set(settings) == set(CONFIG_KEYS)
    assert apply_settings(RunConfig(), settings) == cfg


def test_config_echo_round_trip_and_excludes_jobs():
    cfg = apply_settings(RunConfig(), {"seed": 5, "b1_threshold": 0.1, "jobs": 8})
    echo = config_echo(cfg)
    assert "jobs" not in echo
    assert echo == config_echo(apply_settings(cfg, {"jobs": 1}))
    assert run_config_from_echo(json.loads(json.dumps(echo))) == apply_settings(cfg, {"jobs": 1})


# -- reports ------------------------------------------------------------------------

def _screened_report():
    series = RawSeries([0.0, 1.0], [1.0, 0.9], META)
    return build_report(series, RunConfig(), status="screened_out",
                        screening=ScreeningReport(["insufficient_drop"]), source="a.csv")


def test_report_fields_and_round_trip(tmp_path):
    doc = _screened_report()
    assert doc["schema"] == REPORT_SCHEMA and doc["schema_version"] == REPORT_SCHEMA_VERSION
    assert doc["screening"] == {"accepted": False, "reasons": ["insufficient_drop"]}
    assert doc["meta"]["h0_um"] == 3.0 and doc["fits"] is None
    assert loads_report(dumps_report(doc)) == doc
    write_report(doc, tmp_path / "r.json")
    assert read_report(tmp_path / "r.json") == doc
    assert dumps_report(read_report(tmp_path / "r.json")) == dumps_report(doc)
    assert summary_from_report(doc) is None


def test_report_serialization_rejects_nan_and_maps_nonfinite():
    doc = build_report(None, RunConfig(fit=FitConfig(seed=2)), status="error", error="boom")
    doc["extra"] = float("nan")
    with pytest.raises(ValueError):
        dumps_report(doc)
    from tearfit.io import _jsonable
    assert _jsonable({"x": (1.0, math.inf), "y": np.float64(2.5)}) == {"x": [1.0, None], "y": 2.5}


@pytest.mark.parametrize("text, fragment", [
    ("{not json", "invalid JSON"),
    ('{"schema": "other"}', "not a fit report"),
    (json.dumps({"schema": REPORT_SCHEMA, "schema_version": 99}), "unsupported schema version 99"),
])
def test_report_schema_errors(text, fragment):
    with pytest.raises(ReportSchemaError, match=fragment):
        loads_report(text)


def test_report_numeric_fields_carry_units():
    from tearfit.fitting import fit_hierarchy
    from tearfit.synth import SynthSpec, generate
    from tearfit.model import DimParams
    from tearfit.constants import DEFAULT_CONSTANTS, derive_groups
    from tearfit.preprocess import prepare
    from tearfit.analysis import summarize_instance

    spec = SynthSpec(DimParams("D", 12.0, b1_per_s=0.4, b2_per_s=0.6))
    raw = generate(spec)
    report, clean = prepare(raw)
    hier = fit_hierarchy(clean, spec.scales)
    summary = summarize_instance(hier, spec.scales, raw.meta)
    doc = build_report(raw, RunConfig(), status="fitted", screening=report, clean=clean,
                       groups=derive_groups(DEFAULT_CONSTANTS, spec.scales), hierarchy=hier,
                       summary=summary)
    assert loads_report(dumps_report(doc)) == doc
    assert summary_from_report(doc) == summary
    units = ("_um_per_min", "_per_s", "_mOsM", "_nondim", "_um", "_s", "_percent")

    def check(node, path=""):
        if isinstance(node, dict):
            for k, v in node.items():
                if path.startswith(("config", "meta.quality_flags")):
                    continue
                if isinstance(v, float) and not isinstance(v, bool):
                    assert k.endswith(units) or k in ("roi_x", "roi_y"), f"{path}.{k}"
                check(v, f"{path}.{k}" if path else k)

    check(doc)
