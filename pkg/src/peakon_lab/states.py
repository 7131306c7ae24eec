"""Representations of the Y+ class: momentum measures and peakon ensembles.

Throughout, ``y = u - u_xx`` and ``u = (1/2) e^{-|.|} * y``.  Because
``(1 - d_x^2) e^{-|x|} = 2 delta``, an atom of ``y`` with mass ``m`` is a peakon
``p e^{-|x-q|}`` with amplitude ``p = m / 2``.  Keep the factor 2 in mind
whenever moving between :class:`MomentumMeasure` and :class:`PeakonState`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .domain import GridFn, UniformGrid, make_grid

# exp(-_CHUNK) stays far from double underflow; see _decay_sweep
_CHUNK = 500.0


@dataclass(frozen=True, eq=False)
class PeakonState:
    """Particle ensemble ``u = sum_i p_i exp(-|x - q_i|)``."""

    q: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        q = np.atleast_1d(np.asarray(self.q, dtype=float))
        p = np.atleast_1d(np.asarray(self.p, dtype=float))
        if q.shape != p.shape or q.ndim != 1:
            raise ValueError("q and p must be 1-d sequences of equal length")
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(p))):
            raise ValueError("peakon state contains non-finite values")
        if q.size > 1 and np.any(np.diff(q) <= 0):
            raise ValueError("peakon positions must be strictly increasing")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "p", p)

    @property
    def n(self) -> int:
        return self.q.size

    @property
    def positive(self) -> bool:
        return bool(np.all(self.p > 0))

    @property
    def mass(self) -> float:
        """``M = <y, 1> = 2 sum p_i``."""
        return float(2.0 * np.sum(self.p))

    def shifted(self, s: float) -> "PeakonState":
        return PeakonState(self.q + s, self.p.copy())

    def scaled(self, factor: float) -> "PeakonState":
        return PeakonState(self.q.copy(), factor * self.p)

    def reflected(self) -> "PeakonState":
        """The state of ``-u(-x)``."""
        return PeakonState(-self.q[::-1], -self.p[::-1])

    def to_measure(self) -> "MomentumMeasure":
        return MomentumMeasure(self.q.copy(), 2.0 * self.p)

    def to_array(self) -> np.ndarray:
        return np.column_stack([self.q, self.p])


def single_peakon(c: float, x0: float = 0.0) -> PeakonState:
    return PeakonState([x0], [c])


def peakon_train(speeds, positions) -> PeakonState:
    return PeakonState(np.asarray(positions, float), np.asarray(speeds, float))


@dataclass(frozen=True, eq=False)
class MomentumMeasure:
    """Nonnegative measure ``y``: point masses plus an optional grid density.

    Density samples are read as averages over the cells
    ``[x_j - dx/2, x_j + dx/2)``.
    """

    positions: np.ndarray
    masses: np.ndarray
    density: GridFn | None = None

    def __post_init__(self):
        x = np.atleast_1d(np.asarray(self.positions, dtype=float))
        m = np.atleast_1d(np.asarray(self.masses, dtype=float))
        if x.shape != m.shape or x.ndim != 1:
            raise ValueError("atom positions and masses must have equal length")
        if np.any(m <= 0):
            raise ValueError("atom masses must be positive")
        if x.size > 1 and np.any(np.diff(x) <= 0):
            raise ValueError("atom positions must be strictly increasing")
        if self.density is not None and np.min(self.density.values) < -1e-12:
            raise ValueError("density must be nonnegative")
        object.__setattr__(self, "positions", x)
        object.__setattr__(self, "masses", m)

    @property
    def atoms(self):
        return list(zip(self.positions.tolist(), self.masses.tolist()))

    def total_mass(self) -> float:
        total = float(np.sum(self.masses))
        if self.density is not None:
            total += float(np.sum(self.density.values) * self.density.grid.dx)
        return total

    def to_json(self) -> dict:
        out = {"atoms": [[float(x), float(m)] for x, m in self.atoms]}
        if self.density is not None:
            g = self.density.grid
            out["density"] = {
                "grid": {"L": g.L, "N": g.N, "center": g.center},
                "values": self.density.values.tolist(),
            }
        return out

    @classmethod
    def from_json(cls, data: dict) -> "MomentumMeasure":
        atoms = np.asarray(data.get("atoms", []), dtype=float).reshape(-1, 2)
        density = None
        if data.get("density"):
            gd = data["density"]["grid"]
            grid = make_grid(gd["L"], int(gd["N"]), gd.get("center", 0.0))
            density = GridFn(grid, np.asarray(data["density"]["values"], float))
        return cls(atoms[:, 0], atoms[:, 1], density)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "MomentumMeasure":
        return cls.from_json(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# exact field evaluation for particle states


def _decay_sweep(s: np.ndarray, w: np.ndarray, rate: float = 1.0) -> np.ndarray:
    """``out_i = sum_{j <= i} w_j exp(-rate (s_i - s_j))`` for sorted ``s``.

    Evaluated chunkwise relative to a local reference point so that the
    exponentials never overflow however far apart the points are.
    """
    out = np.empty_like(w, dtype=float)
    n = s.size
    start = 0
    carry = 0.0
    carry_pos = s[0] if n else 0.0
    while start < n:
        ref = s[start]
        stop = int(np.searchsorted(s, ref + _CHUNK / rate, side="right"))
        stop = max(stop, start + 1)
        seg = s[start:stop]
        grow = np.exp(rate * (seg - ref))
        acc = np.cumsum(w[start:stop] * grow) / grow
        acc += carry * np.exp(-rate * (seg - carry_pos))
        out[start:stop] = acc
        carry = acc[-1]
        carry_pos = seg[-1]
        start = stop
    return out


def _left_right(s: np.ndarray, w: np.ndarray, rate: float = 1.0):
    """Inclusive left sums and strictly-right sums of ``w e^{-rate|s_i-s_j|}``."""
    left = _decay_sweep(s, w, rate)
    right_incl = _decay_sweep(-s[::-1], w[::-1], rate)[::-1]
    return left, right_incl - w


@dataclass(frozen=True, eq=False)
class ParticleFields:
    """Pointwise values of u and its companions for a particle state.

    ``ux`` is the mean of the one-sided derivatives (sgn(0) = 0 convention);
    ``ux_left``/``ux_right`` are the limits from the left and right.
    ``v = (4 - d^2)^{-1} u`` and ``h = (1 - d^2)^{-1} u^2``.
    """

    x: np.ndarray
    u: np.ndarray
    ux: np.ndarray
    ux_left: np.ndarray
    ux_right: np.ndarray
    v: np.ndarray
    vx: np.ndarray
    vxx: np.ndarray
    h: np.ndarray
    hx: np.ndarray


def particle_fields(state: PeakonState, points) -> ParticleFields:
    """Evaluate all fields exactly at ``points`` in O((N + M) log(N + M))."""
    x = np.atleast_1d(np.asarray(points, dtype=float))
    n, m = state.n, x.size
    s = np.concatenate([state.q, x])
    w = np.concatenate([state.p, np.zeros(m)])
    kind = np.concatenate([np.zeros(n), np.ones(m)])
    # atoms sort before evaluation points at ties
    order = np.lexsort((kind, s))
    s, w = s[order], w[order]
    is_eval = order >= n
    where = order[is_eval] - n

    L1, R1 = _left_right(s, w, 1.0)
    L2, R2 = _left_right(s, w, 2.0)

    # h through P(x) = int_{-inf}^x e^{-(x-s)} u^2, Q(x) = int_x^inf e^{-(s-x)} u^2
    delta = np.diff(s)
    alpha, beta = L1[:-1], R1[:-1]
    # beta e^{delta} is the right sum at s_i including the mass sitting there
    beta_next = R1[1:] + w[1:]
    e1 = np.exp(-delta)
    one_m = -np.expm1(-delta)
    incP = (alpha**2 * (e1 - e1**2) + 2 * alpha * beta * one_m
            + (beta_next**2 - beta**2 * e1) / 3.0)
    incQ = (alpha**2 * (-np.expm1(-3 * delta)) / 3.0 + 2 * alpha * beta * one_m
            + beta * (beta_next - beta))
    # tails beyond the outermost points, where u is a single exponential
    P0 = (R1[0] + w[0]) ** 2 / 3.0
    Qn = L1[-1] ** 2 / 3.0
    P = _decay_sweep(s, np.concatenate([[P0], incP]), 1.0)
    Q = _decay_sweep(-s[::-1], np.concatenate([[Qn], incQ[::-1]]), 1.0)[::-1]

    # mass sitting exactly at each evaluation point
    lo = np.searchsorted(state.q, x, side="left")
    hi = np.searchsorted(state.q, x, side="right")
    cum = np.concatenate([[0.0], np.cumsum(state.p)])
    at = cum[hi] - cum[lo]

    def pick(arr):
        out = np.empty(m)
        out[where] = arr[is_eval]
        return out

    L1e, R1e, L2e, R2e = pick(L1), pick(R1), pick(L2), pick(R2)
    u = L1e + R1e
    ux = -(L1e - at) + R1e
    U2 = L2e + R2e
    U2x = -2.0 * (L2e - at) + 2.0 * R2e
    v = u / 3.0 - U2 / 6.0
    vx = ux / 3.0 - U2x / 6.0
    Pe, Qe = pick(P), pick(Q)
    return ParticleFields(
        x=x, u=u, ux=ux, ux_left=ux + at, ux_right=ux - at,
        v=v, vx=vx, vxx=4.0 * v - u, h=0.5 * (Pe + Qe), hx=0.5 * (Qe - Pe),
    )


def peakon_field(state: PeakonState, points) -> np.ndarray:
    """``u(x) = sum_i p_i exp(-|x - q_i|)`` on the whole line."""
    x = np.atleast_1d(np.asarray(points, dtype=float))
    if state.n == 0:
        return np.zeros_like(x)
    if state.n * x.size <= 2_000_000:
        return np.exp(-np.abs(x[:, None] - state.q[None, :])) @ state.p
    return particle_fields(state, x).u


def quadrature_rule(state: PeakonState, margin: float = 40.0,
                    panel: float = 1.0, order: int = 16):
    """Gauss-Legendre panels aligned with the particles.

    Every integrand built from u, v, h of a particle state is smooth between
    consecutive particles, so panel-wise Gauss quadrature converges
    exponentially.  The rule covers ``[q_min - margin, q_max + margin]``.
    """
    if state.n == 0:
        lo, hi = -margin, margin
        breaks = np.array([lo, hi])
    else:
        breaks = np.concatenate([[state.q[0] - margin], state.q, [state.q[-1] + margin]])
    lengths = np.diff(breaks)
    counts = np.maximum(1, np.ceil(lengths / panel).astype(int))
    gap = np.repeat(np.arange(lengths.size), counts)
    offset = np.arange(gap.size) - np.repeat(np.cumsum(counts) - counts, counts)
    edges = np.append(breaks[gap] + offset * (lengths / counts)[gap], breaks[-1])
    t, wt = np.polynomial.legendre.leggauss(order)
    a, b = edges[:-1, None], edges[1:, None]
    nodes = 0.5 * (b - a) * t[None, :] + 0.5 * (a + b)
    weights = 0.5 * (b - a) * wt[None, :]
    return nodes.ravel(), weights.ravel()


# ---------------------------------------------------------------------------
# measures and grids


def atom_field(positions, masses, points) -> np.ndarray:
    """``(1/2) sum_i m_i exp(-|x - x_i|)`` on the whole line."""
    x = np.atleast_1d(np.asarray(points, float))
    pos = np.asarray(positions, float)
    if pos.size == 0:
        return np.zeros_like(x)
    return 0.5 * np.exp(-np.abs(x[:, None] - pos[None, :])) @ np.asarray(masses, float)


def cell_kernel(grid: UniformGrid) -> np.ndarray:
    """Weights ``K_m`` with ``u(x_j) = sum_m K_m d_{j-m}`` for cell-average data ``d``.

    ``K_m`` integrates the periodized ``e^{-|x|}/2`` over the cell ``m`` steps
    away, so piecewise-constant densities are convolved exactly.
    """
    dx, L = grid.dx, grid.L
    m = np.arange(grid.N)
    r = np.minimum(m, grid.N - m) * dx

    def images(s):
        # sum over periodic images of e^{-|s + nL|} for 0 <= s <= L/2
        return (np.exp(-s) + np.exp(-(L - s))) / (1.0 - np.exp(-L))

    ker = np.sinh(0.5 * dx) * images(r)
    # own cell: exact integral of the central image plus the far images
    ker[0] = (1.0 - np.exp(-0.5 * dx)) + np.sinh(0.5 * dx) * (images(0.0) - 1.0)
    return ker


def measure_to_field(y: MomentumMeasure, grid: UniformGrid) -> GridFn:
    """``u = p * y``: closed-form kernel sums for atoms, exact cell convolution for density."""
    vals = atom_field(y.positions, y.masses, grid.x)
    if y.density is not None:
        dens = y.density
        if dens.grid != grid:
            raise ValueError("density grid differs from the target grid")
        ker = cell_kernel(grid)
        vals = vals + np.fft.irfft(np.fft.rfft(dens.values) * np.fft.rfft(ker), n=grid.N)
    return GridFn(grid, vals)


def state_to_grid(state: PeakonState, grid: UniformGrid) -> GridFn:
    return GridFn(grid, peakon_field(state, grid.x))


def _cell_moments(density: GridFn, edges: np.ndarray):
    """Mass and first moment of the cell-average reconstruction left of ``edges``."""
    g = density.grid
    d = density.values
    dx = g.dx
    left0 = g.x[0] - 0.5 * dx
    cm = np.concatenate([[0.0], np.cumsum(d * dx)])
    lefts = left0 + dx * np.arange(g.N)
    cmom = np.concatenate([[0.0], np.cumsum(d * dx * (lefts + 0.5 * dx))])
    pos = np.clip(edges, left0, left0 + g.L)
    j = np.clip(np.floor((pos - left0) / dx).astype(int), 0, g.N - 1)
    part = np.clip(pos - lefts[j], 0.0, dx)
    mass = cm[j] + d[j] * part
    mom = cmom[j] + d[j] * 0.5 * ((lefts[j] + part) ** 2 - lefts[j] ** 2)
    return mass, mom


def discretize_measure(y: MomentumMeasure, spacing: float) -> PeakonState:
    """Particle discretization: bin the density, one particle per bin at its centroid.

    Bins are ``[k*spacing, (k+1)*spacing)``.  Bin mass ``m`` becomes a particle
    with amplitude ``m/2``; mass and first moment are preserved exactly.
    """
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    q = [y.positions]
    mass = [y.masses]
    if y.density is not None:
        g = y.density.grid
        lo = g.x[0] - 0.5 * g.dx
        k0 = np.floor(lo / spacing)
        k1 = np.ceil((lo + g.L) / spacing)
        edges = spacing * np.arange(k0, k1 + 1)
        cmass, cmom = _cell_moments(y.density, edges)
        bm = np.diff(cmass)
        bmom = np.diff(cmom)
        # bins of denormal mass would give zero amplitudes after halving
        keep = bm > 1e-250
        q.append(bmom[keep] / bm[keep])
        mass.append(bm[keep])
    q = np.concatenate(q)
    mass = np.concatenate(mass)
    order = np.argsort(q, kind="stable")
    q, mass = q[order], mass[order]
    if q.size > 1:
        # merge coincident particles so positions stay strictly increasing
        uq, inv = np.unique(q, return_inverse=True)
        mass = np.bincount(inv, weights=mass)
        q = uq
    return PeakonState(q, 0.5 * mass)


def _bump(x):
    out = np.zeros_like(x)
    inside = np.abs(x) < 1
    out[inside] = np.exp(1.0 / (x[inside] ** 2 - 1.0))
    return out


_RHO_MASS = None


def _rho_mass() -> float:
    global _RHO_MASS
    if _RHO_MASS is None:
        t, w = np.polynomial.legendre.leggauss(200)
        _RHO_MASS = float(np.sum(w * _bump(t)))
    return _RHO_MASS


def mollifier(n: int, points) -> np.ndarray:
    """``rho_n = n rho(n x) / int rho`` with ``rho = exp(1/(x^2-1))`` on (-1, 1)."""
    return n * _bump(n * np.asarray(points, float)) / _rho_mass()


def mollify(u: GridFn, n: int) -> GridFn:
    """Periodic convolution with ``rho_n``; the discrete kernel has unit mass."""
    if n < 1:
        raise ValueError("n must be >= 1")
    g = u.grid
    r = np.mod(g.x - g.x[0] + 0.5 * g.L, g.L) - 0.5 * g.L
    ker = mollifier(n, r)
    total = ker.sum() * g.dx
    if total <= 0:
        return u.with_values(u.values.copy())
    ker /= total
    out = np.fft.irfft(np.fft.rfft(u.values) * np.fft.rfft(ker) * g.dx, n=g.N)
    # convolution is centred on node 0 of the kernel array
    return u.with_values(out)


# ---------------------------------------------------------------------------
# random Y+ data


@dataclass(frozen=True)
class YplusSampleSpec:
    """Ranges for random Y+ measures: atoms plus a clipped bump density."""

    atom_count: tuple = (0, 4)
    atom_mass: tuple = (0.05, 2.0)
    spread: float = 6.0
    bump_count: tuple = (0, 3)
    bump_amplitude: tuple = (0.05, 1.0)
    bump_width: tuple = (0.3, 2.0)
    L: float = 80.0
    N: int = 2048
    seed: int = 0

    def __post_init__(self):
        for name in ("atom_mass", "bump_amplitude", "bump_width"):
            lo, hi = getattr(self, name)
            if not (0 < lo <= hi):
                raise ValueError(f"{name} must be a positive range")
        if self.spread <= 0 or self.L <= 0:
            raise ValueError("spread and L must be positive")
        if self.atom_count[0] < 0 or self.bump_count[0] < 0:
            raise ValueError("counts must be nonnegative")


def sample_Yplus(spec: YplusSampleSpec) -> MomentumMeasure:
    """Deterministic random Y+ measure for the given seed."""
    rng = np.random.default_rng(spec.seed)
    n_atoms = int(rng.integers(spec.atom_count[0], spec.atom_count[1] + 1))
    n_bumps = int(rng.integers(spec.bump_count[0], spec.bump_count[1] + 1))
    if n_atoms + n_bumps == 0:
        n_atoms = 1
    pos = np.sort(rng.uniform(-spec.spread, spec.spread, n_atoms))
    pos = np.unique(pos)
    masses = rng.uniform(*spec.atom_mass, pos.size)
    density = None
    if n_bumps:
        grid = make_grid(spec.L, spec.N)
        x = grid.x
        vals = np.zeros(grid.N)
        for _ in range(n_bumps):
            amp = rng.uniform(*spec.bump_amplitude)
            width = rng.uniform(*spec.bump_width)
            centre = rng.uniform(-spec.spread, spec.spread)
            if rng.random() < 0.5:
                vals += amp * np.exp(-0.5 * ((x - centre) / width) ** 2)
            else:
                # smoothed indicator, occasionally with a small negative
                # undershoot that the clipping removes
                edge = max(0.05, 0.2 * width)
                vals += amp * 0.5 * (np.tanh((x - centre + width) / edge)
                                     - np.tanh((x - centre - width) / edge))
                vals -= 0.02 * amp * np.exp(-0.5 * ((x - centre) / (0.1 * width)) ** 2)
        density = GridFn(grid, np.clip(vals, 0.0, None))
    return MomentumMeasure(pos, masses, density)


def gaussian_bump(mass: float, centre: float, width: float, spacing: float) -> PeakonState:
    """Particles carrying a Gaussian momentum bump of total y-mass ``mass``.

    Sampled at ``centre + k * spacing`` within three widths; amplitudes are
    half the sampled masses.
    """
    if mass <= 0 or width <= 0 or spacing <= 0:
        raise ValueError("mass, width and spacing must be positive")
    k = np.arange(-np.floor(3 * width / spacing), np.floor(3 * width / spacing) + 1)
    x = centre + spacing * k
    w = np.exp(-0.5 * ((x - centre) / width) ** 2)
    return PeakonState(x, 0.5 * mass * w / w.sum())


def merge_states(*states: PeakonState) -> PeakonState:
    """Union of particle sets; particles at the same position are added."""
    q = np.concatenate([s.q for s in states])
    p = np.concatenate([s.p for s in states])
    uq, inv = np.unique(q, return_inverse=True)
    return PeakonState(uq, np.bincount(inv, weights=p, minlength=uq.size))
