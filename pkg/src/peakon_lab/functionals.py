"""Conserved quantities, localized energies and the Y+ inequality battery.

Every functional accepts either a :class:`GridFn` (smooth data, spectral
operators) or a :class:`PeakonState` (evaluated exactly: closed-form sums
for pairings with ``y`` and panel Gauss quadrature for integrands, which are
smooth between consecutive particles).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import singledispatch

import numpy as np

from .domain import GridFn, deriv_array, helmholtz_inv, helmholtz_inv_array, integrate
from .states import (
    MomentumMeasure,
    PeakonState,
    discretize_measure,
    particle_fields,
    quadrature_rule,
)


@dataclass(frozen=True)
class FunctionalReport:
    name: str
    value: float
    auxiliary: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise ValueError(f"{self.name}: non-finite value")
        for key, val in self.auxiliary.items():
            if not np.isfinite(val):
                raise ValueError(f"{self.name}: non-finite auxiliary value {key}")


# ---------------------------------------------------------------------------
# grid helpers


def _grid_v(u: GridFn):
    v = helmholtz_inv_array(u.values, u.grid, 2.0)
    vx = deriv_array(v, u.grid, 1)
    vxx = 4.0 * v - u.values
    return v, vx, vxx


def _pair_matrix(s: PeakonState):
    d = np.abs(s.q[:, None] - s.q[None, :])
    return d, np.outer(s.p, s.p)


# ---------------------------------------------------------------------------
# conserved quantities


@singledispatch
def mass_M(u) -> float:
    """``M(u) = <y, 1> = int u``."""
    raise TypeError(f"unsupported type {type(u).__name__}")


@mass_M.register
def _(u: GridFn) -> float:
    return integrate(u)


@mass_M.register
def _(u: PeakonState) -> float:
    return u.mass


@singledispatch
def energy_CH(u) -> float:
    """``int u^2 + u_x^2``."""
    raise TypeError(f"unsupported type {type(u).__name__}")


@energy_CH.register
def _(u: GridFn) -> float:
    ux = deriv_array(u.values, u.grid, 1)
    return float(np.sum(u.values**2 + ux**2) * u.grid.dx)


@energy_CH.register
def _(u: PeakonState) -> float:
    # int e^{-|s|} e^{-|s-d|} = (1+d) e^{-d}, and the derivative pairing is (1-d) e^{-d}
    d, pp = _pair_matrix(u)
    return float(np.sum(2.0 * pp * np.exp(-d)))


@singledispatch
def cubic_CH(u) -> float:
    """``int u^3 + u u_x^2``."""
    raise TypeError(f"unsupported type {type(u).__name__}")


@cubic_CH.register
def _(u: GridFn) -> float:
    ux = deriv_array(u.values, u.grid, 1)
    return float(np.sum(u.values**3 + u.values * ux**2) * u.grid.dx)


@cubic_CH.register
def _(u: PeakonState) -> float:
    x, w = quadrature_rule(u)
    f = particle_fields(u, x)
    return float(np.sum(w * (f.u**3 + f.u * f.ux**2)))


@singledispatch
def cubic_DP(u) -> float:
    """``int u^3``."""
    raise TypeError(f"unsupported type {type(u).__name__}")


@cubic_DP.register
def _(u: GridFn) -> float:
    return float(np.sum(u.values**3) * u.grid.dx)


@cubic_DP.register
def _(u: PeakonState) -> float:
    x, w = quadrature_rule(u)
    return float(np.sum(w * particle_fields(u, x).u ** 3))


def energy_density(u):
    """Pointwise ``4v^2 + 5v_x^2 + v_xx^2`` at the grid nodes or quadrature nodes.

    Returns ``(x, weights, density)``.
    """
    if isinstance(u, GridFn):
        v, vx, vxx = _grid_v(u)
        return u.grid.x, np.full(u.grid.N, u.grid.dx), 4 * v**2 + 5 * vx**2 + vxx**2
    x, w = quadrature_rule(u)
    f = particle_fields(u, x)
    return x, w, 4 * f.v**2 + 5 * f.vx**2 + f.vxx**2


@singledispatch
def energy_DP_pair(u) -> tuple:
    """Both routes to H: ``(<y, v>, int 4v^2 + 5v_x^2 + v_xx^2)``."""
    raise TypeError(f"unsupported type {type(u).__name__}")


@energy_DP_pair.register
def _(u: GridFn):
    v, vx, _ = _grid_v(u)
    ux = deriv_array(u.values, u.grid, 1)
    # <u - u_xx, v> after one integration by parts
    pairing = float(np.sum(u.values * v + ux * vx) * u.grid.dx)
    _, w, dens = energy_density(u)
    return pairing, float(np.sum(w * dens))


@energy_DP_pair.register
def _(u: PeakonState):
    pairing = float(2.0 * np.sum(u.p * particle_fields(u, u.q).v)) if u.n else 0.0
    _, w, dens = energy_density(u)
    return pairing, float(np.sum(w * dens))


def energy_DP(u, tol: float = 1e-6) -> float:
    """DP Hamiltonian ``H(u) = <y, v> = int 4v^2 + 5v_x^2 + v_xx^2``.

    Both expressions are computed; a relative disagreement above ``tol``
    points to an operator bug and raises.
    """
    pairing, integral = energy_DP_pair(u)
    scale = max(abs(pairing), abs(integral), 1e-300)
    if abs(pairing - integral) > tol * scale:
        raise RuntimeError(
            f"H disagreement: <y,v>={pairing!r} vs integral={integral!r}"
        )
    return integral


def h_of_u(u: GridFn) -> GridFn:
    """``h = (1 - d_x^2)^{-1} u^2``."""
    return helmholtz_inv(u * u.values, 1.0)


def norm_ratio(w: GridFn) -> float:
    """``H(w) / ||w||^2``, which lies in [1/4, 1)."""
    norm2 = float(np.sum(w.values**2) * w.grid.dx)
    if norm2 == 0:
        raise ValueError("w must be nonzero")
    return energy_DP(w) / norm2


def rho_profile(points) -> np.ndarray:
    """``rho = (4 - d^2)^{-1} e^{-|x|} = e^{-|x|}/3 - e^{-2|x|}/6``."""
    a = np.abs(np.asarray(points, float))
    return np.exp(-a) / 3.0 - np.exp(-2.0 * a) / 6.0


def rho_prime(points) -> np.ndarray:
    x = np.asarray(points, float)
    a = np.abs(x)
    return -np.sign(x) * (np.exp(-a) - np.exp(-2.0 * a)) / 3.0


# ---------------------------------------------------------------------------
# the weight Psi


def _sech(s):
    a = np.exp(-np.abs(s))
    return 2.0 * a / (1.0 + a * a)


def psi(x):
    """``(2/pi) arctan(exp(x/6))``, evaluated so that psi(x) + psi(-x) = 1 to roundoff."""
    x = np.asarray(x, float)
    e = np.exp(-np.abs(x) / 6.0)
    small = (2.0 / np.pi) * np.arctan(e)
    return np.where(x > 0, 1.0 - small, small)


def psi_prime(x):
    return _sech(np.asarray(x, float) / 6.0) / (6.0 * np.pi)


def psi_pp(x):
    s = np.asarray(x, float) / 6.0
    return -np.tanh(s) * _sech(s) / (36.0 * np.pi)


def psi_ppp(x):
    s = np.asarray(x, float) / 6.0
    sech = _sech(s)
    return sech * (1.0 - 2.0 * sech**2) / (216.0 * np.pi)


@dataclass(frozen=True)
class WeightPsi:
    """``x -> psi(x - z)``."""

    z: float = 0.0

    def __call__(self, x):
        return psi(np.asarray(x, float) - self.z)

    def prime(self, x):
        return psi_prime(np.asarray(x, float) - self.z)

    def ppp(self, x):
        return psi_ppp(np.asarray(x, float) - self.z)


# ---------------------------------------------------------------------------
# localized energies


@dataclass(frozen=True, eq=False)
class EnergyProfile:
    """Precomputed integrand for repeated evaluation of localized energies.

    ``energy`` holds quadrature weights times ``4v^2 + 5v_x^2 + v_xx^2``;
    the momentum part is a list of point masses (atoms or grid cells).
    """

    x: np.ndarray
    energy: np.ndarray
    y_pos: np.ndarray
    y_mass: np.ndarray

    @classmethod
    def of(cls, u) -> "EnergyProfile":
        x, w, dens = energy_density(u)
        if isinstance(u, GridFn):
            y = u.values - deriv_array(u.values, u.grid, 2)
            return cls(x, w * dens, u.grid.x, y * u.grid.dx)
        if isinstance(u, PeakonState):
            return cls(x, w * dens, u.q, 2.0 * u.p)
        raise TypeError(f"unsupported type {type(u).__name__}")

    @property
    def total(self) -> float:
        return float(np.sum(self.energy))

    @property
    def mass(self) -> float:
        return float(np.sum(self.y_mass))

    def localized(self, z: float, gamma: float = 0.0) -> float:
        val = float(np.sum(self.energy * psi(self.x - z)))
        if gamma:
            val += gamma * float(np.sum(self.y_mass * psi(self.y_pos - z)))
        return val

    def localized_left(self, z: float, gamma: float = 0.0) -> float:
        """Same pairing against ``1 - psi(. - z)``."""
        val = float(np.sum(self.energy * psi(z - self.x)))
        if gamma:
            val += gamma * float(np.sum(self.y_mass * psi(z - self.y_pos)))
        return val


def localized_energy(u, z: float, gamma: float = 0.0) -> float:
    """``<4v^2 + 5v_x^2 + v_xx^2 + gamma y, psi(. - z)>``."""
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    return EnergyProfile.of(u).localized(z, gamma)


def x_gamma(u, gamma_level: float, tol: float = 1e-10, max_iter: int = 200,
            profile: EnergyProfile | None = None) -> float:
    """Position ``z`` where the right-localized energy equals ``gamma_level``."""
    prof = profile if profile is not None else EnergyProfile.of(u)
    total = prof.total
    if not (0.0 < gamma_level < total):
        raise ValueError(f"gamma_level must lie in (0, H(u)={total})")
    centre = float(np.sum(prof.x * prof.energy) / total)
    step = 8.0
    lo, hi = centre - step, centre + step
    while prof.localized(lo) <= gamma_level:
        step *= 2.0
        lo = centre - step
    step = 8.0
    while prof.localized(hi) >= gamma_level:
        step *= 2.0
        hi = centre + step
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if prof.localized(mid) > gamma_level:
            lo = mid
        else:
            hi = mid
        if hi - lo < tol:
            break
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# Y+ inequality battery


_INEQUALITIES = (
    "ux_le_u", "3v_le_u", "u_le_6v", "vx_le_2v", "vxx_le_4u_3",
    "h_ge_u2_3", "hx_le_h", "norms_le_mass",
)


def _battery(u, ux, v, vx, vxx, h, hx):
    return {
        "ux_le_u": float(np.max(np.abs(ux) - u)),
        "3v_le_u": float(np.max(3.0 * v - u)),
        "u_le_6v": float(np.max(u - 6.0 * v)),
        "vx_le_2v": float(np.max(np.abs(vx) - 2.0 * v)),
        "vxx_le_4u_3": float(np.max(np.abs(vxx) - 4.0 * u / 3.0)),
        "h_ge_u2_3": float(np.max(u**2 / 3.0 - h)),
        "hx_le_h": float(np.max(np.abs(hx) - h)),
    }


def _report(viol: dict, extra: dict) -> FunctionalReport:
    aux = dict(viol)
    aux.update(extra)
    worst = max(viol.values())
    return FunctionalReport("yplus_inequalities", max(worst, 0.0), aux)


@singledispatch
def check_Yplus_inequalities(u) -> FunctionalReport:
    """Maximal pointwise violations of the Y+ bounds.

    Covers ``|u_x| <= u``, ``3v <= u <= 6v``, ``|v_x| <= 2v``,
    ``|v_xx| <= 4u/3``, ``h >= u^2/3``, ``|h_x| <= h`` and
    ``max(|u|_2, |u|_inf, |u_x|_2, |u_x|_inf) <= <y, 1>``.
    A value <= 0 means the bound holds.
    """
    raise TypeError(f"unsupported type {type(u).__name__}")


@check_Yplus_inequalities.register
def _(u: GridFn) -> FunctionalReport:
    g = u.grid
    uv = u.values
    ux = deriv_array(uv, g, 1)
    v, vx, vxx = _grid_v(u)
    h = helmholtz_inv_array(uv**2, g, 1.0)
    hx = deriv_array(h, g, 1)
    viol = _battery(uv, ux, v, vx, vxx, h, hx)
    mass = integrate(u)
    norms = max(np.sqrt(np.sum(uv**2) * g.dx), np.max(np.abs(uv)),
                np.sqrt(np.sum(ux**2) * g.dx), np.max(np.abs(ux)))
    viol["norms_le_mass"] = float(norms - mass)
    return _report(viol, {"mass": mass})


@check_Yplus_inequalities.register
def _(u: PeakonState) -> FunctionalReport:
    if u.n == 0:
        return _report({k: 0.0 for k in _INEQUALITIES}, {"mass": 0.0})
    if not u.positive:
        raise ValueError("the battery applies to Y+ states (all p > 0)")
    x, w = quadrature_rule(u, margin=30.0, panel=0.5, order=8)
    f = particle_fields(u, x)
    viol = _battery(f.u, f.ux, f.v, f.vx, f.vxx, f.h, f.hx)
    at = particle_fields(u, u.q)
    one_sided = np.maximum(np.abs(at.ux_left), np.abs(at.ux_right))
    viol["ux_le_u"] = max(viol["ux_le_u"], float(np.max(one_sided - at.u)))
    # sup norms are attained at particles: u and u_x are convex/monotone between them
    l2_u = np.sqrt(np.sum(w * f.u**2))
    l2_ux = np.sqrt(np.sum(w * f.ux**2))
    norms = max(l2_u, l2_ux, np.max(at.u), np.max(one_sided))
    viol["norms_le_mass"] = float(norms - u.mass)
    return _report(viol, {"mass": u.mass})


@check_Yplus_inequalities.register
def _(u: MomentumMeasure, spacing: float | None = None) -> FunctionalReport:
    if spacing is None:
        spacing = u.density.grid.dx if u.density is not None else 1.0
    return check_Yplus_inequalities(discretize_measure(u, spacing))
