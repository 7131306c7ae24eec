"""Periodic uniform grids and Fourier-symbol operators.

The whole-line problem is approximated on a torus of length ``L`` that is
large compared to the e^{-|x|} decay scale of the solutions.  All operators
act through the discrete Fourier transform, so the Helmholtz inverses
(a^2 - d_x^2)^{-1} are exact on the space of trigonometric polynomials.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class UniformGrid:
    """Periodic grid on ``[center - L/2, center + L/2)`` with ``N`` nodes.

    ``center`` defaults to 0, giving nodes ``x_j = -L/2 + j*dx``.  A nonzero
    center is only used to sample whole-line particle states that have
    travelled far from the origin.
    """

    L: float
    N: int
    center: float = 0.0

    def __post_init__(self):
        if not np.isfinite(self.L) or self.L <= 0:
            raise ValueError(f"grid length must be positive, got {self.L}")
        n = int(self.N)
        if n != self.N or n < 16 or n & (n - 1):
            raise ValueError(f"N must be a power of two >= 16, got {self.N}")

    @property
    def dx(self) -> float:
        return self.L / self.N

    @property
    def x(self) -> np.ndarray:
        return self.center - 0.5 * self.L + self.dx * np.arange(self.N)

    @property
    def k(self) -> np.ndarray:
        """Wavenumbers of the real FFT, ``2*pi*m/L`` for ``m = 0..N/2``."""
        return 2.0 * np.pi * np.fft.rfftfreq(self.N, d=self.dx)

    @property
    def k_full(self) -> np.ndarray:
        """Wavenumbers ``2*pi*m/L`` for ``m`` in ``[-N/2, N/2)``, sorted."""
        m = np.arange(-self.N // 2, self.N // 2)
        return 2.0 * np.pi * m / self.L

    def shifted(self, center: float) -> "UniformGrid":
        return UniformGrid(self.L, self.N, center)


def make_grid(L: float, N: int, center: float = 0.0) -> UniformGrid:
    return UniformGrid(float(L), N, float(center))


@dataclass(frozen=True, eq=False)
class GridFn:
    """Real function sampled on the nodes of a :class:`UniformGrid`."""

    grid: UniformGrid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != (self.grid.N,):
            raise ValueError(
                f"expected {self.grid.N} values, got shape {vals.shape}"
            )
        if not np.all(np.isfinite(vals)):
            raise ValueError("grid function contains non-finite values")
        object.__setattr__(self, "values", vals)

    @property
    def x(self) -> np.ndarray:
        return self.grid.x

    def with_values(self, values) -> "GridFn":
        return GridFn(self.grid, values)

    def __add__(self, other):
        return self.with_values(self.values + _vals(other))

    def __sub__(self, other):
        return self.with_values(self.values - _vals(other))

    def __mul__(self, other):
        return self.with_values(self.values * _vals(other))

    __rmul__ = __mul__

    def __neg__(self):
        return self.with_values(-self.values)


def _vals(f):
    return f.values if isinstance(f, GridFn) else f


def sample(fn, grid: UniformGrid) -> GridFn:
    """Evaluate a vectorised callable on the grid nodes."""
    return GridFn(grid, fn(grid.x))


def integrate(f: GridFn) -> float:
    """Rectangle rule, which is spectrally accurate for periodic data."""
    return float(np.sum(f.values) * f.grid.dx)


def _symbol_apply(values: np.ndarray, grid: UniformGrid, symbol: np.ndarray) -> np.ndarray:
    return np.fft.irfft(np.fft.rfft(values) * symbol, n=grid.N)


def deriv(f: GridFn, order: int = 1) -> GridFn:
    """Spectral derivative of order 1 or 2."""
    if order not in (1, 2):
        raise ValueError(f"order must be 1 or 2, got {order}")
    return f.with_values(deriv_array(f.values, f.grid, order))


def deriv_array(values: np.ndarray, grid: UniformGrid, order: int = 1) -> np.ndarray:
    k = grid.k
    if order == 1:
        symbol = 1j * k
        # the Nyquist mode has no real odd derivative
        symbol[-1] = 0.0
    else:
        symbol = -(k**2)
    return _symbol_apply(values, grid, symbol)


def helmholtz_inv(f: GridFn, a: float = 1.0) -> GridFn:
    """Solve ``(a^2 - d_x^2) w = f`` through the symbol ``1/(a^2 + k^2)``."""
    return f.with_values(helmholtz_inv_array(f.values, f.grid, a))


def helmholtz_inv_array(values: np.ndarray, grid: UniformGrid, a: float = 1.0) -> np.ndarray:
    if a <= 0:
        raise ValueError("a must be positive")
    return _symbol_apply(values, grid, 1.0 / (a * a + grid.k**2))


def helmholtz(f: GridFn, a: float = 1.0) -> GridFn:
    """Apply ``a^2 - d_x^2`` spectrally."""
    return f.with_values(_symbol_apply(f.values, f.grid, a * a + f.grid.k**2))


def periodic_distance(x: np.ndarray, L: float) -> np.ndarray:
    """Distance to the nearest periodic image of the origin, in ``[0, L/2]``."""
    r = np.mod(np.asarray(x, dtype=float) + 0.5 * L, L) - 0.5 * L
    return np.abs(r)


def green_kernel(a: float, grid: UniformGrid) -> GridFn:
    """Periodic fundamental solution of ``a^2 - d_x^2`` with source at 0.

    Equals ``cosh(a(L/2 - |x|)) / (2a sinh(aL/2))``, written in a form that
    does not overflow for large ``aL``.
    """
    if a <= 0:
        raise ValueError("a must be positive")
    r = periodic_distance(grid.x, grid.L)
    L = grid.L
    vals = (np.exp(-a * r) + np.exp(-a * (L - r))) / (2.0 * a * (1.0 - np.exp(-a * L)))
    return GridFn(grid, vals)


def resolvent_identity_residual(f: GridFn) -> float:
    """Sup-norm defect of (4-d^2)^{-1}(1-d^2)^{-1} = [(1-d^2)^{-1} - (4-d^2)^{-1}]/3."""
    left = helmholtz_inv(helmholtz_inv(f, 1.0), 2.0)
    right = (helmholtz_inv(f, 1.0).values - helmholtz_inv(f, 2.0).values) / 3.0
    return float(np.max(np.abs(left.values - right), initial=0.0))


def spectral_interp(values: np.ndarray, grid: UniformGrid, points) -> np.ndarray:
    """Evaluate the trigonometric interpolant of ``values`` at arbitrary points."""
    pts = np.atleast_1d(np.asarray(points, dtype=float))
    coef = np.fft.rfft(values) / grid.N
    # interior modes stand for +-k pairs; the real part keeps only the
    # cosine of the (real) Nyquist coefficient
    weights = np.full(coef.size, 2.0)
    weights[0] = 1.0
    weights[-1] = 1.0
    phase = np.exp(1j * np.outer(pts - grid.x[0], grid.k))
    return (phase @ (weights * coef)).real
