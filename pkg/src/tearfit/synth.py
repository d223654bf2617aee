"""Synthetic intensity series from known parameters, and round-trip recovery runs."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from tearfit.analysis import MechanismThresholds, classify, summarize_instance
from tearfit.constants import DEFAULT_CONSTANTS, PhysicalConstants, TrialScales, derive_groups
from tearfit.fitting import BoxConstraints, FitConfig, FitFailedError, fit_hierarchy
from tearfit.fluorescence import IntensityModelParams, intensity_trajectory
from tearfit.model import DimParams, solve, to_nondim
from tearfit.preprocess import DEFAULT_PREPROCESS, PreprocessConfig, RawSeries, SeriesMeta, prepare


@dataclass(frozen=True)
class SynthSpec:
    truth: DimParams
    h0_um: float = 3.0
    ts_s: float = 3.0
    f0_percent: float = 0.2
    rate_hz: float = 30.0
    noise: float = 0.0
    seed: int = 0
    raw_scale: float = 200.0
    quantize: bool = False
    subject_id: str = "synth"
    trial_id: str = "0"
    roi_id: str = "0"
    force_include: bool = False
    # seconds of forward model recorded past the end of the fit window
    tail_s: float = 0.0

    def __post_init__(self):
        if not self.rate_hz > 0:
            raise ValueError("sampling rate must be positive")
        if not self.noise >= 0:
            raise ValueError("noise level must be nonnegative")
        if not self.tail_s >= 0:
            raise ValueError("tail duration must be nonnegative")

    @property
    def scales(self) -> TrialScales:
        return TrialScales.from_percent(self.h0_um, self.ts_s, self.f0_percent)

    def meta(self) -> SeriesMeta:
        return SeriesMeta(self.subject_id, self.trial_id, self.roi_id, self.f0_percent,
                          self.h0_um, force_include=self.force_include)


def validate(spec: SynthSpec, box: BoxConstraints = BoxConstraints()):
    if not box.contains(spec.truth):
        raise ValueError(f"true parameters {spec.truth} lie outside the box constraints")


def generate(spec: SynthSpec, box: BoxConstraints = BoxConstraints(),
             constants: PhysicalConstants = DEFAULT_CONSTANTS, delta_sus: float = 0.1) -> RawSeries:
    """Raw series: forward model times ``raw_scale`` plus seeded Gaussian noise, clipped at 0.

    A forward run that stops early (sustained thickening or brightening, or
    full breakup) gives a series truncated at that point, marked by
    ``meta.quality_flags['synth_truncated']``.
    """
    validate(spec, box)
    # the tail is the same physical process recorded for longer
    duration = spec.ts_s + spec.tail_s
    scales = TrialScales.from_percent(spec.h0_um, duration, spec.f0_percent, constants)
    n = int(round(duration * spec.rate_hz)) + 1
    tau = np.linspace(0.0, 1.0, n)
    groups = derive_groups(constants, scales)
    params = to_nondim(spec.truth, scales)
    traj = solve(params, groups.P_c, tau, monitor=True, delta_sus=delta_sus,
                 phi=groups.phi, f0=scales.f0)
    I = intensity_trajectory(traj, IntensityModelParams(groups.phi, scales.f0))
    rng = np.random.default_rng(spec.seed)
    values = spec.raw_scale * I + rng.normal(0.0, spec.noise * spec.raw_scale, I.size)
    values = np.clip(values, 0.0, None)
    if spec.quantize:
        values = np.round(values)
    meta = spec.meta()
    end = traj.termination_time if traj.terminated else 1.0
    meta.quality_flags["synth_truncated"] = bool(end * duration < spec.ts_s)
    return RawSeries(tau[:I.size] * duration, values, meta)


def spawn_seeds(root: int, n: int) -> list:
    """Per-case seeds that do not depend on execution order."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(root).spawn(n)]


def recovery_case(spec: SynthSpec, config: FitConfig = FitConfig(),
                  pre: PreprocessConfig = DEFAULT_PREPROCESS,
                  thresholds: MechanismThresholds = MechanismThresholds(),
                  constants: PhysicalConstants = DEFAULT_CONSTANTS) -> dict:
    """Generate, preprocess, fit the hierarchy and classify one spec."""
    raw = generate(spec, config.box, constants, config.delta_sus)
    report, clean = prepare(raw, pre)
    out = {"spec": spec, "screening": report.reasons, "error": None}
    if clean is None:
        out["error"] = "screened_out"
        return out
    scales = TrialScales.from_percent(spec.h0_um, clean.ts_s, spec.f0_percent, constants)
    try:
        hier = fit_hierarchy(clean, scales, config, constants)
    except FitFailedError as exc:
        out["error"] = f"fit_failed: {exc}"
        return out
    summary = summarize_instance(hier, scales, raw.meta, thresholds, constants)
    truth = spec.truth
    fit_d = hier.fits["D"].dim
    rel = {}
    for name, true_val, fit_val in (("v_um_per_min", truth.v_um_per_min, fit_d.v_um_per_min),
                                    ("b1_per_s", truth.b1_per_s, fit_d.b1_per_s),
                                    ("b2_per_s", truth.b2_per_s, fit_d.b2_per_s)):
        rel[name] = abs(fit_val - true_val) / abs(true_val) if true_val != 0 else abs(fit_val)
    out.update(
        hierarchy=hier, summary=summary, clean=clean, scales=scales,
        residuals=hier.residuals, ordering_verified=hier.ordering_verified, rel_error=rel,
        planted=classify(truth.v_um_per_min, truth.b1_per_s, thresholds),
        classified=summary.mechanism)
    return out


def recovery_suite(specs, config: FitConfig = FitConfig(),
                   pre: PreprocessConfig = DEFAULT_PREPROCESS,
                   thresholds: MechanismThresholds = MechanismThresholds(),
                   constants: PhysicalConstants = DEFAULT_CONSTANTS) -> list:
    return [recovery_case(s, config, pre, thresholds, constants) for s in specs]


def identifiable_d_specs(n: int, seed: int = 0, noise: float = 0.0,
                         config: FitConfig = FitConfig(), constants=DEFAULT_CONSTANTS,
                         pre: PreprocessConfig = DEFAULT_PREPROCESS) -> list:
    """Model-D truths away from degenerate corners of parameter space.

    Draws v' >= 2 um/min, |b1'| >= 0.1 1/s and b2' in [0.2, 1.5] 1/s, and keeps
    a draw only if its noiseless forward run completes without a penalty and
    passes screening, so that the truth is an admissible fit.
    """
    rng = np.random.default_rng(seed)
    specs = []
    case_seeds = spawn_seeds(seed, 10 * n)
    while len(specs) < n:
        v = rng.uniform(2.0, 30.0)
        b1 = rng.uniform(0.1, 1.0) * rng.choice([-1.0, 1.0])
        b2 = rng.uniform(0.2, 1.5)
        h0 = rng.uniform(2.0, 6.0)
        f0 = rng.uniform(0.1, 0.3)
        spec = SynthSpec(DimParams("D", v, b1_per_s=b1, b2_per_s=b2), h0_um=h0, ts_s=3.0,
                         f0_percent=f0, noise=noise, seed=case_seeds[len(specs)],
                         trial_id=str(len(specs)))
        clean_spec = SynthSpec(spec.truth, h0_um=h0, ts_s=3.0, f0_percent=f0)
        raw = generate(clean_spec, config.box, constants, config.delta_sus)
        if raw.meta.quality_flags["synth_truncated"]:
            continue
        report, clean = prepare(raw, pre)
        if clean is None or clean.ts_s != 3.0:
            continue
        specs.append(spec)
    return specs


# (v' range um/min, b1' range 1/s) per quadrant, each at least 20% away from
# the default thresholds of 2 um/min and 0.038 1/s
PLANTED_RANGES = {
    "evap": ((15.0, 25.0), (-0.03, 0.02)),
    "flow": ((0.0, 1.5), (0.3, 1.0)),
    "mixed": ((5.0, 20.0), (0.2, 0.8)),
    "gtf": ((0.3, 1.5), (-0.01, 0.02)),
}


def planted_population(n_per_quadrant: int, seed: int = 0, n_subjects: int = 2,
                       noise: float = 0.0, pre: PreprocessConfig = DEFAULT_PREPROCESS,
                       constants: PhysicalConstants = DEFAULT_CONSTANTS) -> list:
    """Model-D specs planted in each mechanism quadrant.

    Slow thinning in the ``gtf`` quadrant cannot pass the 25% drop rule, so
    those specs carry ``force_include``. A draw is kept only if its noiseless
    series runs to completion and yields a full-length window. Cases are
    spread over ``n_subjects`` subject ids.
    """
    rng = np.random.default_rng(seed)
    seeds = spawn_seeds(seed, 4 * n_per_quadrant)
    specs = []
    for q, ((vlo, vhi), (blo, bhi)) in PLANTED_RANGES.items():
        i = 0
        while i < n_per_quadrant:
            k = len(specs)
            truth = DimParams("D", rng.uniform(vlo, vhi), b1_per_s=rng.uniform(blo, bhi),
                              b2_per_s=rng.uniform(0.2, 1.0))
            spec = SynthSpec(truth, h0_um=rng.uniform(2.5, 4.0),
                             f0_percent=rng.uniform(0.15, 0.25), noise=noise,
                             seed=seeds[k], subject_id=f"S{k % n_subjects + 1}",
                             trial_id=f"{q}{i:02d}", roi_id="0", force_include=q == "gtf")
            raw = generate(replace(spec, noise=0.0), constants=constants)
            if raw.meta.quality_flags["synth_truncated"]:
                continue
            _, clean = prepare(raw, pre)
            if clean is None or clean.ts_s != spec.ts_s:
                continue
            specs.append(spec)
            i += 1
    return specs
