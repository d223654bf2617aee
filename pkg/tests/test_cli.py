import csv
import json
import shutil

import pytest

from tearfit.analysis import InstanceSummary, MECHANISMS, read_counts, read_scatter
from tearfit.cli import _grid, build_parser, load_batch_summaries, main, resolve_config, sweep_counts
from tearfit.io import read_report, sidecar_path


def _synth(out, *flags):
    assert main(["synth", "--out", str(out), *flags]) == 0


def _tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


# -- fit ----------------------------------------------------------------------------

def test_fit_noiseless_file(tmp_path, capsys):
    _synth(tmp_path, "--kind", "D", "--v", "12", "--b1", "0.4", "--b2", "0.6", "--name", "m")
    out = tmp_path / "m_report.json"
    assert main(["fit", str(tmp_path / "m.csv"), "--out", str(out)]) == 0
    doc = read_report(out)
    assert doc["status"] == "fitted"
    assert doc["fits"]["D"]["residual_nondim"] <= 1e-10
    assert doc["summary"]["mechanism"] == "mixed"
    assert doc["fits"]["D"]["dimensional"]["v_um_per_min"] == pytest.approx(12.0, rel=0.02)
    assert doc["ordering_verified"] is True


def test_fit_writes_report_to_stdout(tmp_path, capsys):
    _synth(tmp_path, "--kind", "O", "--v", "20", "--name", "o")
    capsys.readouterr()
    assert main(["fit", str(tmp_path / "o.csv")]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["summary"]["mechanism"] == "evap"


def test_fit_screened_out_on_drop_rule(tmp_path, capsys):
    _synth(tmp_path, "--kind", "O", "--v", "1", "--name", "slow")
    out = tmp_path / "r.json"
    assert main(["fit", str(tmp_path / "slow.csv"), "--out", str(out)]) == 2
    doc = read_report(out)
    assert doc["status"] == "screened_out"
    assert "insufficient_drop" in doc["screening"]["reasons"]
    assert "insufficient_drop" in capsys.readouterr().err


def test_fit_missing_metadata_field(tmp_path, capsys):
    _synth(tmp_path, "--name", "x")
    side = sidecar_path(tmp_path / "x.csv")
    meta = json.loads(side.read_text())
    del meta["h0_um"]
    side.write_text(json.dumps(meta))
    out = tmp_path / "r.json"
    assert main(["fit", str(tmp_path / "x.csv"), "--out", str(out)]) == 1
    assert "missing metadata field: h0_um" in capsys.readouterr().err
    assert "h0_um" in read_report(out)["error"]


def test_fit_malformed_csv_reports_line(tmp_path, capsys):
    _synth(tmp_path, "--name", "x")
    path = tmp_path / "x.csv"
    lines = path.read_text().splitlines()
    lines[4] = "0.1,oops"
    path.write_text("\n".join(lines) + "\n")
    assert main(["fit", str(path)]) == 1
    assert "x.csv:5:" in capsys.readouterr().err


# -- batch --------------------------------------------------------------------------

def test_batch_empty_directory(tmp_path):
    src = tmp_path / "empty"
    src.mkdir()
    assert main(["batch", str(src), "--out", str(tmp_path / "o")]) == 0
    counts = read_counts(tmp_path / "o" / "mechanism_counts.csv")
    assert counts == {"all": {**{m: 0 for m in MECHANISMS}, "total": 0, "excluded": 0}}
    index = json.loads((tmp_path / "o" / "batch_index.json").read_text())
    assert index["n_files"] == 0 and index["fitted"] == []


def test_batch_missing_directory(tmp_path, capsys):
    assert main(["batch", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 1
    assert "not a directory" in capsys.readouterr().err


@pytest.fixture(scope="module")
def small_set(tmp_path_factory):
    d = tmp_path_factory.mktemp("small")
    for name, flags in {"a": ["--v", "15", "--b1", "0.01", "--b2", "0.5"],
                        "b": ["--v", "1", "--b1", "0.6", "--b2", "0.5"],
                        "c": ["--v", "10", "--b1", "0.4", "--b2", "0.5"]}.items():
        _synth(d, "--name", name, *flags)
    _synth(d, "--kind", "O", "--v", "1", "--name", "d")  # screened out
    return d


def test_batch_output_independent_of_jobs(small_set, tmp_path):
    assert main(["batch", str(small_set), "--out", str(tmp_path / "j1"), "--jobs", "1"]) == 0
    assert main(["--jobs", "8", "batch", str(small_set), "--out", str(tmp_path / "j8")]) == 0
    assert _tree_bytes(tmp_path / "j1") == _tree_bytes(tmp_path / "j8")
    index = json.loads((tmp_path / "j1" / "batch_index.json").read_text())
    assert index["fitted"] == ["a.csv", "b.csv", "c.csv"] and index["screened_out"] == ["d.csv"]
    assert index["totals"] == {"evap": 1, "flow": 1, "mixed": 1, "gtf": 0, "total": 3}


def test_batch_isolates_failures(small_set, tmp_path, capsys):
    d = tmp_path / "src"
    shutil.copytree(small_set, d)
    (d / "broken.csv").write_text("not,a,series\n")
    assert main(["batch", str(d), "--out", str(tmp_path / "o")]) == 0
    index = json.loads((tmp_path / "o" / "batch_index.json").read_text())
    assert [f["file"] for f in index["failed"]] == ["broken.csv"]
    assert len(index["fitted"]) == 3
    assert "failed: broken.csv" in capsys.readouterr().err


def test_batch_all_failing_exits_nonzero(tmp_path):
    d = tmp_path / "src"
    d.mkdir()
    for name in ("a", "b"):
        (d / f"{name}.csv").write_text("t_seconds,intensity\n0,1\n1,0.5\n")
    assert main(["batch", str(d), "--out", str(tmp_path / "o")]) == 1


def test_batch_median_threshold(small_set, tmp_path):
    assert main(["batch", str(small_set), "--out", str(tmp_path / "o"), "--median-threshold"]) == 0
    index = json.loads((tmp_path / "o" / "batch_index.json").read_text())
    fitted = load_batch_summaries(tmp_path / "o")
    b1 = sorted(i.b1_per_s for i in fitted)
    assert index["thresholds"]["b1_per_s"] == pytest.approx(b1[1])


# -- synth ----------------------------------------------------------------------------

def test_synth_same_seed_identical_files(tmp_path):
    flags = ["--seed", "7", "--noise", "0.02", "--v", "8", "--b1", "0.3", "--b2", "0.4"]
    _synth(tmp_path / "a", *flags)
    _synth(tmp_path / "b", *flags)
    assert _tree_bytes(tmp_path / "a") == _tree_bytes(tmp_path / "b")


def test_synth_out_of_box_is_rejected(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path), "--v", "50"]) == 1
    assert "outside the box" in capsys.readouterr().err
    assert not list(tmp_path.glob("*.csv"))


def test_synth_spec_file(tmp_path, capsys):
    specs = [{"kind": "O", "v_um_per_min": 10, "name": "one", "seed": 3},
             {"kind": "D", "v_um_per_min": 5, "b1_per_s": 0.2, "b2_per_s": 0.5, "subject_id": "S9",
              "trial_id": 4, "noise": 0.01, "tail_s": 0.5}]
    spec_file = tmp_path / "specs.json"
    spec_file.write_text(json.dumps(specs))
    _synth(tmp_path / "o", "--spec-file", str(spec_file))
    assert sorted(p.name for p in (tmp_path / "o").glob("*.csv")) == ["S9_4_0.csv", "one.csv"]
    spec_file.write_text(json.dumps({"kind": "O", "speed": 3}))
    assert main(["synth", "--out", str(tmp_path / "p"), "--spec-file", str(spec_file)]) == 1
    assert "unknown synthetic spec fields" in capsys.readouterr().err


def test_synth_planted_grid_is_recovered(planted_batch, planted_specs):
    index = json.loads((planted_batch / "batch_index.json").read_text())
    per_q = len(planted_specs) // 4
    assert index["totals"] == {**{m: per_q for m in MECHANISMS}, "total": 4 * per_q}


# -- sweep ----------------------------------------------------------------------------

def _sweep_rows(capsys):
    rows = list(csv.DictReader(capsys.readouterr().out.splitlines()))
    return [{k: float(v) for k, v in r.items()} for r in rows]


def test_sweep_defaults_match_batch(planted_batch, capsys):
    assert main(["sweep", str(planted_batch)]) == 0
    rows = _sweep_rows(capsys)
    assert len(rows) == 9
    center = [r for r in rows if r["v_threshold_um_per_min"] == 2.0 and r["b1_threshold_per_s"] == 0.038]
    index = json.loads((planted_batch / "batch_index.json").read_text())
    assert {m: int(center[0][m]) for m in MECHANISMS} == {m: index["totals"][m] for m in MECHANISMS}
    # planted truths sit at least 20% from the thresholds, so +-10% changes nothing
    for r in rows:
        assert {m: int(r[m]) for m in MECHANISMS} == {m: index["totals"][m] for m in MECHANISMS}


def test_sweep_extreme_threshold_single_quadrant(planted_batch, capsys):
    assert main(["sweep", str(planted_batch), "--v-grid", "1000", "--b1-grid", "1000"]) == 0
    (row,) = _sweep_rows(capsys)
    assert row["gtf"] == row["total"] == 40
    assert main(["sweep", str(planted_batch), "--v-grid", "1000", "--b1-grid", "-1000"]) == 0
    (row,) = _sweep_rows(capsys)
    assert row["flow"] == 40


def _inst(v, b1, key):
    return InstanceSummary("S", str(key), "0", 3.0, 0.2, 3.0, v, b1, 0.5, 1.1, 332.2, 0.8, 5.0,
                           "gtf", False)


def test_sweep_changes_only_inside_perturbation_band():
    near = [_inst(2.1, 0.5, 0), _inst(1.9, 0.0, 1), _inst(10.0, 0.040, 2), _inst(0.5, 0.036, 3)]
    far = [_inst(20.0, 0.0, 4), _inst(0.1, 0.5, 5), _inst(9.0, 0.3, 6), _inst(0.2, -0.02, 7)]
    v_grid, b_grid = [1.8, 2.0, 2.2], [0.0342, 0.038, 0.0418]
    base = sweep_counts(far, [2.0], [0.038])[0][2:]
    for row in sweep_counts(far, v_grid, b_grid):
        assert row[2:] == base
    changed = {tuple(r[2:]) for r in sweep_counts(near + far, v_grid, b_grid)}
    assert len(changed) > 1


def test_sweep_writes_csv_and_needs_batch_output(planted_batch, tmp_path, capsys):
    out = tmp_path / "sweep.csv"
    assert main(["sweep", str(planted_batch), "--v-grid", "1:3:3", "--out", str(out)]) == 0
    assert out.read_text().splitlines()[0].startswith("v_threshold_um_per_min,b1_threshold_per_s")
    assert main(["sweep", str(tmp_path / "missing")]) == 1
    assert "no batch output" in capsys.readouterr().err


def test_grid_parsing():
    assert _grid("1,2.5,3") == [1.0, 2.5, 3.0]
    assert _grid("0:1:3") == [0.0, 0.5, 1.0]


# -- report ---------------------------------------------------------------------------

def test_report_prints_table_and_writes_csvs(planted_batch, tmp_path, capsys):
    out = tmp_path / "rep"
    assert main(["report", str(planted_batch), "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "subject" in text and "\nall " in text
    # two subjects with twenty instances each, so neither is excluded
    assert "excluded from subject-level analysis" not in text
    counts = read_counts(out / "mechanism_counts.csv")
    assert counts["all"]["total"] == 40
    assert len(read_scatter(out / "scatter.csv")) == 40
    assert (out / "mechanism_counts.csv").read_bytes() == (planted_batch / "mechanism_counts.csv").read_bytes()


def test_report_with_changed_thresholds(planted_batch, tmp_path):
    out = tmp_path / "rep"
    assert main(["report", str(planted_batch), "--out", str(out), "--v-threshold", "1000"]) == 0
    counts = read_counts(out / "mechanism_counts.csv")["all"]
    assert counts["evap"] == counts["mixed"] == 0


# -- flags and config -------------------------------------------------------------------

def test_global_flags_before_or_after_subcommand(tmp_path):
    parser = build_parser()
    a = resolve_config(parser.parse_args(["--seed", "4", "--v-threshold", "3", "sweep", "x"]))
    b = resolve_config(parser.parse_args(["sweep", "x", "--seed", "4", "--v-threshold", "3"]))
    assert a == b and a.fit.seed == 4 and a.thresholds.v_um_per_min == 3.0


def test_config_file_and_flag_override(tmp_path):
    cfg_path = tmp_path / "run.cfg"
    cfg_path.write_text("seed = 11\nb1_threshold = 0.05\nobjective = mean\n")
    parser = build_parser()
    cfg = resolve_config(parser.parse_args(["--config", str(cfg_path), "sweep", "x", "--seed", "2"]))
    assert cfg.fit.seed == 2 and cfg.thresholds.b1_per_s == 0.05 and cfg.fit.objective == "mean"


def test_bad_config_exits_with_error(tmp_path, capsys):
    cfg_path = tmp_path / "run.cfg"
    cfg_path.write_text("seed = 1\nnonsense = 3\n")
    assert main(["--config", str(cfg_path), "sweep", str(tmp_path)]) == 1
    assert "run.cfg:2: unknown key 'nonsense'" in capsys.readouterr().err
    assert main(["--jobs", "0", "sweep", str(tmp_path)]) == 1


def test_version(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert capsys.readouterr().out.startswith("tearfit ")
