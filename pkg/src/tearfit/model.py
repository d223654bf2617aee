"""The O/F/D hierarchy of local thinning models and its solver.

The state is integrated as ``(h, m)`` with ``m = h c`` so that the solute
balance ``dm/dt = -g m`` is carried exactly; ``c`` is recovered as ``m / h``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, optimize

from tearfit import _kernel
from tearfit.constants import TrialScales

KINDS = ("O", "F", "D")
_KIND_CODE = {"O": _kernel.KIND_O, "F": _kernel.KIND_F, "D": _kernel.KIND_D}

RTOL = 1e-10
ATOL = 1e-11
H_MIN = 1e-6
B2_SERIES_CUTOFF = 1e-8

TERMINATION_REASONS = {
    _kernel.STATUS_OK: None,
    _kernel.STATUS_H_MIN: "h_min",
    _kernel.STATUS_THICKENING: "sustained_thickening",
    _kernel.STATUS_BRIGHTENING: "sustained_brightening",
    _kernel.STATUS_UNDERFLOW: "step_underflow",
}


class SingularStateError(ValueError):
    """Raised when the right-hand side is evaluated at h <= 0."""


class SolverFailure(RuntimeError):
    """Step size underflow during integration."""

    def __init__(self, message: str, last_time: float):
        super().__init__(message)
        self.last_time = last_time


class NotApplicableError(ValueError):
    """The requested closed form or bound does not exist for these parameters."""


@dataclass(frozen=True)
class StrainParams:
    """Strain rate g(t): ``O`` is zero, ``F`` is the constant ``a``,
    ``D`` decays as ``b1 exp(-b2 t)``."""

    kind: str = "O"
    a: float = 0.0
    b1: float = 0.0
    b2: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown strain kind {self.kind!r}")
        unused = {"O": ("a", "b1", "b2"), "F": ("b1", "b2"), "D": ("a",)}[self.kind]
        for name in unused:
            if getattr(self, name) != 0.0:
                raise ValueError(f"model {self.kind} has no parameter {name}")

    @classmethod
    def O(cls) -> "StrainParams":  # noqa: E743
        return cls("O")

    @classmethod
    def F(cls, a: float) -> "StrainParams":
        return cls("F", a=float(a))

    @classmethod
    def D(cls, b1: float, b2: float) -> "StrainParams":
        return cls("D", b1=float(b1), b2=float(b2))


PARAM_NAMES = {"O": ("v",), "F": ("v", "a"), "D": ("v", "b1", "b2")}


@dataclass(frozen=True)
class ModelParams:
    """Nondimensional evaporation rate plus strain."""

    v: float
    strain: StrainParams = field(default_factory=StrainParams)

    @property
    def kind(self) -> str:
        return self.strain.kind

    def vector(self) -> np.ndarray:
        s = self.strain
        return np.array({"O": [self.v], "F": [self.v, s.a], "D": [self.v, s.b1, s.b2]}[s.kind])

    @classmethod
    def from_vector(cls, kind: str, x) -> "ModelParams":
        x = [float(xi) for xi in x]
        if kind == "O":
            return cls(x[0], StrainParams.O())
        if kind == "F":
            return cls(x[0], StrainParams.F(x[1]))
        return cls(x[0], StrainParams.D(x[1], x[2]))


@dataclass(frozen=True)
class DimParams:
    """Dimensional parameters: v' in um/min, strain rates in 1/s."""

    kind: str
    v_um_per_min: float
    a_per_s: float = 0.0
    b1_per_s: float = 0.0
    b2_per_s: float = 0.0

    def __post_init__(self):
        # reuse StrainParams validation of which rates a model carries
        StrainParams(self.kind, self.a_per_s, self.b1_per_s, self.b2_per_s)

    def vector(self) -> np.ndarray:
        return np.array({"O": [self.v_um_per_min],
                         "F": [self.v_um_per_min, self.a_per_s],
                         "D": [self.v_um_per_min, self.b1_per_s, self.b2_per_s]}[self.kind])

    @classmethod
    def from_vector(cls, kind: str, x) -> "DimParams":
        x = [float(xi) for xi in x]
        if kind == "O":
            return cls(kind, x[0])
        if kind == "F":
            return cls(kind, x[0], a_per_s=x[1])
        return cls(kind, x[0], b1_per_s=x[1], b2_per_s=x[2])


def to_nondim(dim: DimParams, scales: TrialScales) -> ModelParams:
    ts = scales.ts_s
    v = ts * (dim.v_um_per_min / 60.0) / scales.h0_um
    strain = StrainParams(dim.kind, ts * dim.a_per_s, ts * dim.b1_per_s, ts * dim.b2_per_s)
    return ModelParams(v, strain)


def to_dim(params: ModelParams, scales: TrialScales) -> DimParams:
    ts = scales.ts_s
    s = params.strain
    return DimParams(s.kind, params.v * scales.h0_um / ts * 60.0,
                     s.a / ts, s.b1 / ts, s.b2 / ts)


def strain_rate(strain: StrainParams, t):
    t = np.asarray(t, dtype=float)
    if strain.kind == "O":
        out = np.zeros_like(t)
    elif strain.kind == "F":
        out = np.full_like(t, strain.a)
    else:
        out = strain.b1 * np.exp(-strain.b2 * t)
    return out[()] if out.ndim == 0 else out


def strain_integral(strain: StrainParams, t):
    """Integral of g from 0 to t."""
    t = np.asarray(t, dtype=float)
    if strain.kind == "O":
        out = np.zeros_like(t)
    elif strain.kind == "F":
        out = strain.a * t
    elif abs(strain.b2) < B2_SERIES_CUTOFF:
        # b1 (1 - e^{-b2 t}) / b2 -> b1 t (1 - b2 t / 2)
        out = strain.b1 * t * (1.0 - 0.5 * strain.b2 * t)
    else:
        out = -strain.b1 * np.expm1(-strain.b2 * t) / strain.b2
    return out[()] if out.ndim == 0 else out


def rhs(state, t: float, params: ModelParams, P_c: float):
    """(dh/dt, dm/dt) for state ``(h, m)``."""
    h, m = state
    if not h > 0:
        raise SingularStateError(f"thickness must be positive, got h={h!r}")
    g = float(strain_rate(params.strain, t))
    return -g * h + P_c * (m / h - 1.0) - params.v, -g * m


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    h: np.ndarray
    m: np.ndarray
    terminated: bool = False
    termination_time: float | None = None
    reason: str | None = None

    @property
    def c(self) -> np.ndarray:
        return self.m / self.h

    def __len__(self):
        return len(self.times)


def _check_times(output_times) -> np.ndarray:
    t = np.ascontiguousarray(output_times, dtype=float)
    if t.ndim != 1 or t.size == 0:
        raise ValueError("output_times must be a non-empty 1-D array")
    if t[0] < 0 or t[-1] > 1 or np.any(np.diff(t) <= 0):
        raise ValueError("output_times must be strictly increasing within [0, 1]")
    return t


def integrate_raw(params: ModelParams, P_c: float, t: np.ndarray, *, rtol=RTOL, atol=ATOL,
                  h_min=H_MIN, delta_sus=0.1, monitor=False, phi=1.0, f0=1.0,
                  max_step=None):
    """Thin pass-through to the compiled integrator; see ``_kernel.integrate``."""
    s = params.strain
    if max_step is None:
        max_step = delta_sus / 10.0 if monitor else 0.1
    return _kernel.integrate(_KIND_CODE[s.kind], s.a, s.b1, s.b2, params.v, P_c, t,
                             rtol, atol, h_min, delta_sus, monitor, phi, f0, max_step)


def solve(params: ModelParams, P_c: float, output_times, *, rtol: float = RTOL,
          atol: float = ATOL, h_min: float = H_MIN, monitor: bool = False,
          delta_sus: float = 0.1, phi: float = 1.0, f0: float = 1.0) -> Trajectory:
    """Solve from ``h = c = 1`` and sample at ``output_times``.

    With ``monitor=True`` the integration also stops once dh/dt > 0 or the
    modelled intensity rises for a stretch of ``delta_sus``; ``phi`` and ``f0``
    are only read in that case. Reaching ``h_min`` always stops the run. A
    stopped run comes back truncated to the samples reached, with
    ``terminated`` set.
    """
    t = _check_times(output_times)
    H, M, k, status, t_end = integrate_raw(params, P_c, t, rtol=rtol, atol=atol, h_min=h_min,
                                           delta_sus=delta_sus, monitor=monitor, phi=phi,
                                           f0=f0)
    if status == _kernel.STATUS_UNDERFLOW:
        raise SolverFailure(f"step size underflow at t={t_end:.6g}", t_end)
    done = status == _kernel.STATUS_OK
    return Trajectory(t[:k].copy(), H[:k], M[:k], terminated=not done,
                      termination_time=None if done else float(t_end),
                      reason=TERMINATION_REASONS[status])


def _implicit_model_o(v: float, P_c: float, t: np.ndarray) -> np.ndarray:
    # m == 1, so dh/dt = P_c (1/h - 1) - v separates. With al = v + P_c,
    # t(h) = (1 - h)/al + (P_c/al^2) ln((al - P_c)/(al h - P_c)), and h falls
    # monotonically towards h* = P_c / al.
    al = v + P_c
    h_star = P_c / al

    def elapsed(h):
        return (1.0 - h) / al + P_c / al**2 * math.log(v / (al * h - P_c))

    out = np.empty_like(t)
    for i, ti in enumerate(t):
        if ti == 0.0:
            out[i] = 1.0
            continue
        # osmosis only adds water, so h(t) >= 1 - v t
        lo = max(1.0 - v * ti, h_star * (1.0 + 1e-15))
        if elapsed(lo) <= ti:
            out[i] = lo
            continue
        out[i] = optimize.brentq(lambda h: elapsed(h) - ti, lo, 1.0, xtol=1e-16, rtol=1e-15)
    return out


def closed_form(params: ModelParams, P_c: float, t):
    """Reference (h, c) from quadrature, independent of the ODE stepper.

    Supported cases:

    * ``P_c == 0`` with any strain: ``h = E(t) (1 - v int_0^t ds / E(s))``
      where ``E = exp(-int g)``, and ``c = E / h``;
    * ``v == 0`` with any ``P_c``: ``c`` stays 1 and ``h = E``;
    * model O with ``P_c > 0``: the separable thickness equation has an
      elementary time-of-thickness integral, inverted by root finding.
    """
    t_arr = np.atleast_1d(np.asarray(t, dtype=float))
    E = np.exp(-strain_integral(params.strain, t_arr))
    if params.v == 0.0:
        h, c = E, np.ones_like(t_arr)
    elif P_c == 0.0:
        def inv_E(s):
            return math.exp(float(strain_integral(params.strain, s)))

        acc = np.array([integrate.quad(inv_E, 0.0, ti, epsabs=1e-13, epsrel=1e-12)[0]
                        for ti in t_arr])
        h = E * (1.0 - params.v * acc)
        c = E / h
    elif params.kind == "O" and P_c > 0 and params.v > 0:
        h = _implicit_model_o(params.v, P_c, t_arr)
        c = 1.0 / h
    else:
        raise NotApplicableError("no closed form for this parameter combination")
    if np.ndim(t) == 0:
        return float(h[0]), float(c[0])
    return h, c


def osmolarity_equilibrium(v: float, P_c: float) -> float:
    """Fixed point ``1 + v / P_c`` of the model-O osmolarity."""
    if not P_c > 0:
        raise NotApplicableError("equilibrium osmolarity needs P_c > 0")
    return 1.0 + v / P_c
