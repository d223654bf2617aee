import os
import time

import pytest
from hypothesis import HealthCheck, settings

from tearfit.cli import main
from tearfit.synth import identifiable_d_specs, planted_population, recovery_case

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", max_examples=500, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


PLANTED_PER_QUADRANT = 10
PLANTED_SEED = 0


@pytest.fixture(scope="session")
def planted_specs():
    return planted_population(PLANTED_PER_QUADRANT, seed=PLANTED_SEED)


@pytest.fixture(scope="session")
def planted_dir(tmp_path_factory):
    """Forty noiseless planted series written by the ``synth`` command."""
    d = tmp_path_factory.mktemp("planted")
    assert main(["synth", "--planted", str(PLANTED_PER_QUADRANT), "--seed", str(PLANTED_SEED),
                 "--out", str(d)]) == 0
    return d


@pytest.fixture(scope="session")
def planted_batch(planted_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("planted_batch")
    t0 = time.perf_counter()
    assert main(["batch", str(planted_dir), "--out", str(out)]) == 0
    (out / "elapsed_s.txt").write_text(f"{time.perf_counter() - t0!r}\n")
    return out


@pytest.fixture(scope="session")
def identifiable_results():
    """Noiseless recovery of the twenty identifiability-restricted Model-D specs.

    Each result carries ``elapsed_s``, the wall time of its generate, prepare,
    fit and classify run.
    """
    results = []
    for spec in identifiable_d_specs(20, seed=0):
        t0 = time.perf_counter()
        r = recovery_case(spec)
        r["elapsed_s"] = time.perf_counter() - t0
        results.append(r)
    return results


# -- acceptance summary -------------------------------------------------------------

ACCEPTANCE_LINES = {}


@pytest.fixture
def criterion():
    """``record(number, title, ok, detail)`` logs one PASS/FAIL line and asserts ``ok``."""
    def record(number, title, ok, detail=""):
        line = f"C{number:02d} {'PASS' if ok else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
        ACCEPTANCE_LINES[number] = line
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
