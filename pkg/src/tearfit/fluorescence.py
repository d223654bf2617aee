"""Fluorescent intensity of the film from its thickness and dye concentration."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from tearfit.model import Trajectory


@dataclass(frozen=True)
class IntensityModelParams:
    """``phi`` and ``f0`` are nondimensional; ``I0`` normalises ``I(0)`` to one."""

    phi: float
    f0: float

    def __post_init__(self):
        if not (self.phi > 0 and self.f0 > 0):
            raise ValueError("phi and f0 must be positive")

    @property
    def I0(self) -> float:
        return (1.0 + self.f0**2) / -np.expm1(-self.phi * self.f0)


def fl_concentration(c, f0: float):
    return f0 * np.asarray(c, dtype=float)


def intensity(h, f, params: IntensityModelParams, I0: float | None = None):
    """``I0 (1 - exp(-phi h f)) / (1 + f^2)``; ``I0`` defaults to the normalising value."""
    h = np.asarray(h, dtype=float)
    f = np.asarray(f, dtype=float)
    scale = params.I0 if I0 is None else I0
    out = scale * -np.expm1(-params.phi * h * f) / (1.0 + f * f)
    return out[()] if out.ndim == 0 else out


def intensity_trajectory(traj: Trajectory, params: IntensityModelParams) -> np.ndarray:
    f = fl_concentration(traj.c, params.f0)
    return intensity(traj.h, f, params)
