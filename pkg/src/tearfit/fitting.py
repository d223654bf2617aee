"""Box-constrained multistart fitting of the O/F/D models to a cleaned series."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import optimize
from scipy.stats import qmc

from tearfit import _kernel
from tearfit.constants import DEFAULT_CONSTANTS, PhysicalConstants, TrialScales, derive_groups
from tearfit.fluorescence import IntensityModelParams, intensity_trajectory
from tearfit.model import (ATOL, H_MIN, KINDS, RTOL, DimParams, ModelParams, Trajectory,
                           _KIND_CODE, solve, to_nondim)
from tearfit.preprocess import CleanSeries

DIM_NAMES = {"O": ("v_um_per_min",),
             "F": ("v_um_per_min", "a_per_s"),
             "D": ("v_um_per_min", "b1_per_s", "b2_per_s")}
Z_MAX = 36.0  # logistic(-36) ~ 2e-16


class FitFailedError(RuntimeError):
    def __init__(self, message, best_x=None, best_fun=None):
        super().__init__(message)
        self.best_x = best_x
        self.best_fun = best_fun


@dataclass(frozen=True)
class BoxConstraints:
    """Dimensional parameter ranges (um/min for v', 1/s for the strain rates)."""

    v_um_per_min: tuple = (0.0, 40.0)
    a_per_s: tuple = (-1.0, 2.0)
    b1_per_s: tuple = (-1.0, 5.0)
    b2_per_s: tuple = (0.0, 2.0)

    def __post_init__(self):
        for name, (lo, hi) in asdict(self).items():
            if not lo < hi:
                raise ValueError(f"empty range for {name}: {lo} .. {hi}")

    def bounds(self, kind: str) -> tuple[np.ndarray, np.ndarray]:
        pairs = [getattr(self, name) for name in DIM_NAMES[kind]]
        return np.array([p[0] for p in pairs]), np.array([p[1] for p in pairs])

    def contains(self, dim: DimParams) -> bool:
        lo, hi = self.bounds(dim.kind)
        x = dim.vector()
        return bool(np.all(x >= lo) and np.all(x <= hi))


@dataclass(frozen=True)
class FitConfig:
    rtol: float = 1e-5
    atol: float = 1e-7
    n_lhs: int = 8
    penalty: float = 1e6
    delta_sus: float = 0.1
    objective: str = "trapezoid"
    crosscheck: bool = False
    crosscheck_rtol: float = 1e-4
    seed: int = 0
    max_fev: int = 4000
    restarts: int = 3
    ordering_slack: float = 1e-9
    ordering_retries: int = 3
    box: BoxConstraints = field(default_factory=BoxConstraints)

    def __post_init__(self):
        if not (self.rtol > 0 and self.atol > 0):
            raise ValueError("tolerances must be positive")
        if not 0 < self.delta_sus < 1:
            raise ValueError("delta_sus must lie in (0, 1)")
        if self.objective not in ("trapezoid", "mean"):
            raise ValueError("objective must be 'trapezoid' or 'mean'")


def trapezoid_weights(t: np.ndarray) -> np.ndarray:
    w = np.empty_like(t)
    d = np.diff(t)
    w[0] = d[0] / 2
    w[-1] = d[-1] / 2
    w[1:-1] = (d[:-1] + d[1:]) / 2
    return w


def misfit_value(model_I, data_I, t, objective: str = "trapezoid") -> float:
    """Trapezoid-weighted mean square, or ``sum / N`` over the N + 1 samples."""
    r2 = (np.asarray(model_I) - np.asarray(data_I)) ** 2
    if objective == "mean":
        return float(r2.sum() / (r2.size - 1))
    w = trapezoid_weights(np.asarray(t, dtype=float))
    return float(np.dot(w, r2) / w.sum())


class Objective:
    """Penalised misfit of one model kind as a function of dimensional parameters."""

    def __init__(self, data: CleanSeries, kind: str, scales: TrialScales,
                 config: FitConfig = FitConfig(), constants: PhysicalConstants = DEFAULT_CONSTANTS):
        self.t = np.ascontiguousarray(data.t, dtype=float)
        self.I = np.asarray(data.I, dtype=float)
        self.kind = kind
        self.scales = scales
        self.config = config
        groups = derive_groups(constants, scales)
        self.P_c = groups.P_c
        self.phi = groups.phi
        self.f0 = scales.f0
        self.I0 = IntensityModelParams(self.phi, self.f0).I0
        if config.objective == "mean":
            self.w = np.full(self.t.size, 1.0 / (self.t.size - 1))
        else:
            w = trapezoid_weights(self.t)
            self.w = w / w.sum()
        self.nfev = 0

    def nondim(self, x) -> ModelParams:
        return to_nondim(DimParams.from_vector(self.kind, x), self.scales)

    def _run(self, x):
        ts, h0 = self.scales.ts_s, self.scales.h0_um
        v = ts * (x[0] / 60.0) / h0
        a = ts * x[1] if self.kind == "F" else 0.0
        b1 = ts * x[1] if self.kind == "D" else 0.0
        b2 = ts * x[2] if self.kind == "D" else 0.0
        return _kernel.integrate(_KIND_CODE[self.kind], a, b1, b2, v, self.P_c, self.t,
                                 RTOL, ATOL, H_MIN, self.config.delta_sus, True,
                                 self.phi, self.f0, self.config.delta_sus / 10.0)

    def model_intensity(self, H, M):
        f = self.f0 * M / H
        return self.I0 * -np.expm1(-self.phi * self.f0 * M) / (1.0 + f * f)

    def residuals(self, x):
        """Weighted residual vector whose squared norm is the misfit, or None if penalised."""
        H, M, k, status, t_end = self._run(x)
        if status != _kernel.STATUS_OK:
            return None, t_end
        r = np.sqrt(self.w) * (self.model_intensity(H, M) - self.I)
        return r, 1.0

    def __call__(self, x) -> float:
        self.nfev += 1
        r, frac = self.residuals(x)
        if r is None:
            return self.config.penalty - frac
        val = float(np.dot(r, r))
        return val if math.isfinite(val) else self.config.penalty


def _to_z(x, lo, hi):
    u = (np.asarray(x, dtype=float) - lo) / (hi - lo)
    with np.errstate(divide="ignore"):
        z = np.log(u) - np.log1p(-u)
    return np.clip(z, -Z_MAX, Z_MAX)


def _from_z(z, lo, hi):
    return lo + (hi - lo) * (0.5 * (1.0 + np.tanh(0.5 * np.asarray(z))))


@dataclass
class MinimizeResult:
    x: np.ndarray
    fun: float
    start_index: int
    nfev: int
    converged: bool
    penalized: bool
    crosscheck: dict | None = None


def _nelder_mead(fz, z0, config: FitConfig):
    n = z0.size
    best_z, best_f = z0, fz(z0)
    converged = False
    nfev = 1
    for _ in range(config.restarts + 1):
        simplex = np.vstack([best_z] + [best_z + 0.5 * np.eye(n)[i] for i in range(n)])
        res = optimize.minimize(fz, best_z, method="Nelder-Mead",
                                options={"initial_simplex": simplex, "xatol": config.rtol,
                                         "fatol": config.atol, "maxfev": config.max_fev})
        nfev += res.nfev
        converged = bool(res.success)
        improved = best_f - res.fun
        if res.fun < best_f:
            best_z, best_f = res.x, float(res.fun)
        if improved <= config.atol + config.rtol * abs(best_f):
            break
    return best_z, best_f, nfev, converged


def minimize(objective, lo, hi, starts, config: FitConfig = FitConfig()) -> MinimizeResult:
    """Multistart Nelder-Mead inside the box ``[lo, hi]``.

    The search runs in logistic coordinates ``x = lo + (hi - lo) sigmoid(z)``
    so iterates never leave the box. Every start is also evaluated exactly as
    given (boundary points included) and competes with the optimised points.
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    starts = [np.clip(np.asarray(s, dtype=float), lo, hi) for s in starts]
    if not starts:
        raise ValueError("at least one start point is required")

    def fz(z):
        return objective(_from_z(z, lo, hi))

    best = None
    total = 0
    for i, x0 in enumerate(starts):
        f0 = objective(x0)
        z, f, nfev, conv = _nelder_mead(fz, _to_z(x0, lo, hi), config)
        total += nfev + 1
        x = _from_z(z, lo, hi)
        if f0 <= f:
            x, f = x0, f0
        if best is None or f < best.fun:
            best = MinimizeResult(x=x, fun=f, start_index=i, nfev=0, converged=conv,
                                  penalized=f >= config.penalty - 1.0)
    best.nfev = total
    if best.penalized:
        raise FitFailedError("every start ended in the penalty region", best.x, best.fun)
    if config.crosscheck and hasattr(objective, "residuals"):
        best.crosscheck = _crosscheck(objective, best, lo, hi, config)
    return best


def _crosscheck(objective, best: MinimizeResult, lo, hi, config: FitConfig) -> dict:
    """Levenberg-Marquardt from the Nelder-Mead optimum, in the same logistic coordinates."""
    big = math.sqrt(config.penalty / objective.t.size)

    def resid(z):
        r, _ = objective.residuals(_from_z(z, lo, hi))
        return np.full(objective.t.size, big) if r is None else r

    z0 = _to_z(best.x, lo, hi)
    try:
        res = optimize.least_squares(resid, z0, method="lm", xtol=1e-12, ftol=1e-12)
        f_lm = float(np.dot(res.fun, res.fun))
    except (ValueError, np.linalg.LinAlgError) as exc:  # pragma: no cover - defensive
        return {"method": "levenberg-marquardt", "error": str(exc), "agrees": False}
    scale = max(abs(f_lm), abs(best.fun))
    agrees = abs(f_lm - best.fun) <= config.crosscheck_rtol * scale + config.atol
    return {"method": "levenberg-marquardt", "objective": f_lm,
            "x": _from_z(res.x, lo, hi).tolist(), "agrees": bool(agrees)}


@dataclass
class FitResult:
    kind: str
    params: ModelParams
    dim: DimParams
    residual: float
    trajectory: Trajectory
    intensity: np.ndarray
    at_bound: dict
    penalized: bool
    converged: bool
    start: str
    nfev: int
    crosscheck: dict | None = None


def _bound_flags(x, lo, hi, kind) -> dict:
    tol = 1e-6 * (hi - lo)
    flags = {}
    for name, xi, l, h, tl in zip(DIM_NAMES[kind], x, lo, hi, tol):
        flags[name] = "lower" if xi - l <= tl else "upper" if h - xi <= tl else None
    return flags


def embed(dim: DimParams, kind: str) -> np.ndarray:
    """Dimensional vector of ``dim`` written as the (more general) model ``kind``."""
    x = dim.vector()
    if dim.kind == kind:
        return x
    if (dim.kind, kind) == ("O", "F"):
        return np.array([x[0], 0.0])
    if (dim.kind, kind) == ("O", "D"):
        return np.array([x[0], 0.0, 0.0])
    if (dim.kind, kind) == ("F", "D"):
        return np.array([x[0], x[1], 0.0])
    raise ValueError(f"model {dim.kind} does not embed in model {kind}")


def start_points(kind: str, config: FitConfig, inherited=(), extra_seed: int = 0):
    lo, hi = config.box.bounds(kind)
    labels = ["center"]
    pts = [(lo + hi) / 2]
    if config.n_lhs > 0:
        rng = np.random.default_rng([config.seed, KINDS.index(kind), extra_seed])
        sample = qmc.LatinHypercube(d=lo.size, seed=rng).random(config.n_lhs)
        for i, u in enumerate(sample):
            labels.append(f"lhs{i}")
            pts.append(lo + (hi - lo) * u)
    for i, x in enumerate(inherited):
        labels.append("inherited" if i == 0 else f"inherited{i}")
        pts.append(np.asarray(x, dtype=float))
    return labels, pts


def fit_model(data: CleanSeries, kind: str, scales: TrialScales, config: FitConfig = FitConfig(),
              inherited=(), constants: PhysicalConstants = DEFAULT_CONSTANTS,
              extra_seed: int = 0) -> FitResult:
    """Fit one model kind; ``inherited`` holds extra dimensional start vectors."""
    obj = Objective(data, kind, scales, config, constants)
    lo, hi = config.box.bounds(kind)
    labels, pts = start_points(kind, config, inherited, extra_seed)
    best = minimize(obj, lo, hi, pts, config)
    dim = DimParams.from_vector(kind, best.x)
    params = to_nondim(dim, scales)
    traj = solve(params, obj.P_c, data.t, monitor=True, delta_sus=config.delta_sus,
                 phi=obj.phi, f0=obj.f0)
    model_I = intensity_trajectory(traj, IntensityModelParams(obj.phi, obj.f0))
    return FitResult(kind=kind, params=params, dim=dim, residual=best.fun, trajectory=traj,
                     intensity=model_I, at_bound=_bound_flags(best.x, lo, hi, kind),
                     penalized=best.penalized, converged=best.converged,
                     start=labels[best.start_index], nfev=best.nfev, crosscheck=best.crosscheck)


@dataclass
class HierarchyResult:
    fits: dict
    ordering_verified: bool
    retries: int = 0

    @property
    def residuals(self) -> dict:
        return {k: f.residual for k, f in self.fits.items()}


def ordering_holds(res: dict, slack: float) -> tuple[bool, bool]:
    return res["O"] >= res["F"] - slack, res["F"] >= res["D"] - slack


def fit_hierarchy(data: CleanSeries, scales: TrialScales, config: FitConfig = FitConfig(),
                  constants: PhysicalConstants = DEFAULT_CONSTANTS) -> HierarchyResult:
    """Fit O, then F started from O's optimum, then D started from F's."""
    fits = {"O": fit_model(data, "O", scales, config, constants=constants)}
    fits["F"] = fit_model(data, "F", scales, config, [embed(fits["O"].dim, "F")], constants)
    fits["D"] = fit_model(data, "D", scales, config,
                          [embed(fits["F"].dim, "D"), embed(fits["O"].dim, "D")], constants)
    retries = 0
    ok_of, ok_fd = ordering_holds({k: f.residual for k, f in fits.items()}, config.ordering_slack)
    while not (ok_of and ok_fd) and retries < config.ordering_retries:
        retries += 1
        if not ok_of:
            fits["F"] = fit_model(data, "F", scales, config, [embed(fits["O"].dim, "F")],
                                  constants, extra_seed=retries)
        fits["D"] = fit_model(data, "D", scales, config,
                              [embed(fits["F"].dim, "D"), embed(fits["O"].dim, "D")],
                              constants, extra_seed=retries)
        ok_of, ok_fd = ordering_holds({k: f.residual for k, f in fits.items()},
                                      config.ordering_slack)
    return HierarchyResult(fits=fits, ordering_verified=ok_of and ok_fd, retries=retries)
