"""Nonsmooth terms: values and proximity operators on cell fields.

Three variants cover the supported composite objectives: a weighted L1
penalty (soft thresholding), the indicator of a box-plus-volume
constraint set (clamped shift with a scalar multiplier found by
bisection), and the zero function.  All geometry is area-weighted L2 so
prox outputs are stable under mesh refinement.
"""

from dataclasses import dataclass

import numpy as np

from .mesh import CellField

BOUND_TOL = 1e-9
VOLUME_TOL = 1e-12


class ProxBisectionError(RuntimeError):
    """Raised when the volume-multiplier bisection fails to converge."""


@dataclass(frozen=True)
class L1:
    """beta * integral of |z|."""
    beta: float

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("L1 weight must be nonnegative")


@dataclass(frozen=True)
class BoxVolume:
    """Indicator of {lo <= z <= hi, integral of z = volume}."""
    lo: float
    hi: float
    volume: float

    def __post_init__(self):
        if self.lo > self.hi:
            raise ValueError("lower bound exceeds upper bound")


@dataclass(frozen=True)
class Zero:
    """Identically zero term."""


def phi_value(phi, z):
    """Extended-real value of the nonsmooth term at a cell field."""
    if isinstance(phi, Zero):
        return 0.0
    if isinstance(phi, L1):
        return phi.beta * float(z.areas @ np.abs(z.values))
    if isinstance(phi, BoxVolume):
        if np.any(z.values < phi.lo - BOUND_TOL) or np.any(z.values > phi.hi + BOUND_TOL):
            return np.inf
        if abs(z.integral() - phi.volume) > BOUND_TOL:
            return np.inf
        return 0.0
    raise TypeError(f"unknown nonsmooth term {phi!r}")


def prox_apply(phi, z, r):
    """Proximity operator: argmin (1/2r)||y - z||^2 + phi(y).

    The L1 prox reduces to per-cell soft thresholding because both terms
    carry the same area weights; the BoxVolume prox is a clamped shift
    y = clamp(z - mu, lo, hi) with mu chosen so the volume constraint
    holds to VOLUME_TOL.
    """
    if r <= 0:
        raise ValueError("prox step must be positive")
    if isinstance(phi, Zero):
        return z.copy()
    if isinstance(phi, L1):
        t = r * phi.beta
        y = np.sign(z.values) * np.maximum(np.abs(z.values) - t, 0.0)
        return CellField(z.mesh, y)
    if isinstance(phi, BoxVolume):
        mu = _volume_multiplier(phi, z)
        return CellField(z.mesh, np.clip(z.values - mu, phi.lo, phi.hi))
    raise TypeError(f"unknown nonsmooth term {phi!r}")


def _volume_multiplier(phi, z):
    """Scalar shift making the clamped field hit the target volume."""
    areas = z.areas

    def vol(mu):
        return float(areas @ np.clip(z.values - mu, phi.lo, phi.hi))

    lo_mu = float(z.values.min()) - (phi.hi - phi.lo) - 1.0
    hi_mu = float(z.values.max()) + 1.0
    # defensive bracket expansion; vol is nonincreasing in mu
    for _ in range(60):
        if vol(lo_mu) >= phi.volume:
            break
        lo_mu -= max(1.0, abs(lo_mu))
    for _ in range(60):
        if vol(hi_mu) <= phi.volume:
            break
        hi_mu += max(1.0, abs(hi_mu))
    mu = 0.5 * (lo_mu + hi_mu)
    for _ in range(200):
        mu = 0.5 * (lo_mu + hi_mu)
        v = vol(mu)
        if abs(v - phi.volume) <= VOLUME_TOL:
            return mu
        if v > phi.volume:
            lo_mu = mu
        else:
            hi_mu = mu
    if abs(vol(mu) - phi.volume) <= 10 * VOLUME_TOL:
        return mu
    raise ProxBisectionError("volume-multiplier bisection did not converge")
