"""Physical constants, per-trial scales and the nondimensional groups built from them."""

from __future__ import annotations

from dataclasses import dataclass

UM = 1e-6  # metres per micrometre
NAFL_MOLAR_MASS_G_PER_MOL = 376.27  # sodium fluorescein
# 0.2 % by mass in a water-density solution is 2 g/L; 0.0053 M is this value rounded
F_CR_MOLAR = 0.2 / 100 * 1.0e3 / NAFL_MOLAR_MASS_G_PER_MOL


class InvalidScaleError(ValueError):
    """Raised when a trial scale (h0, ts, f0) is non-positive or non-finite."""


@dataclass(frozen=True)
class PhysicalConstants:
    """Dimensional constants of the thinning model.

    Units are given in the field names. ``c0_mOsM`` is numerically equal to
    mol/m^3. The critical fluorescein concentration is carried both as a mass
    percentage and as a molarity.
    """

    P_o_um_per_s: float = 12.0
    V_w_m3_per_mol: float = 1.8e-5
    c0_mOsM: float = 302.0
    eps_f_per_m_per_M: float = 1.75e7
    f_cr_percent: float = 0.2
    f_cr_molar: float = F_CR_MOLAR
    # Carried for reference only; no model equation consumes these.
    viscosity_Pa_s: float = 1.3e-3
    surface_tension_N_per_m: float = 0.045
    density_kg_per_m3: float = 1.0e3

    def __post_init__(self):
        for name, value in vars(self).items():
            if not value > 0:
                raise ValueError(f"{name} must be positive, got {value!r}")


DEFAULT_CONSTANTS = PhysicalConstants()


@dataclass(frozen=True)
class TrialScales:
    """Dimensional scales of one thinning instance.

    Attributes
    ----------
    h0_um : float
        Initial aqueous-layer thickness in micrometres.
    ts_s : float
        Duration of the fitted window in seconds.
    f0 : float
        Initial fluorescein concentration as a fraction of the critical
        concentration (0.2 % by mass maps to 1.0).
    """

    h0_um: float
    ts_s: float
    f0: float = 1.0

    def __post_init__(self):
        for name in ("h0_um", "ts_s", "f0"):
            value = getattr(self, name)
            # `not value > 0` also catches NaN
            if not value > 0 or value == float("inf"):
                raise InvalidScaleError(f"{name} must be positive and finite, got {value!r}")

    @classmethod
    def from_percent(cls, h0_um: float, ts_s: float, f0_percent: float,
                     constants: PhysicalConstants = DEFAULT_CONSTANTS) -> "TrialScales":
        return cls(h0_um, ts_s, f0_percent / constants.f_cr_percent)

    def f0_percent(self, constants: PhysicalConstants = DEFAULT_CONSTANTS) -> float:
        return self.f0 * constants.f_cr_percent


@dataclass(frozen=True)
class NondimGroups:
    P_c: float
    phi: float


def derive_groups(constants: PhysicalConstants, scales: TrialScales) -> NondimGroups:
    """Nondimensional corneal permeability and Napierian extinction coefficient.

    ``P_c = P_o V_w c0 / (h0/ts)`` and ``phi = eps_f f_cr h0`` with ``f_cr``
    in molar form.
    """
    if not (scales.h0_um > 0 and scales.ts_s > 0):
        raise InvalidScaleError("h0 and ts must be positive")
    h0_m = scales.h0_um * UM
    osmotic_speed = constants.P_o_um_per_s * UM * constants.V_w_m3_per_mol * constants.c0_mOsM
    P_c = osmotic_speed / (h0_m / scales.ts_s)
    phi = constants.eps_f_per_m_per_M * constants.f_cr_molar * h0_m
    return NondimGroups(P_c=P_c, phi=phi)

