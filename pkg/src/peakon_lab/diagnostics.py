"""Residuals and experiment metrics computed from trajectories."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .domain import GridFn, deriv_array, helmholtz_inv_array, spectral_interp
from .dynamics import BFamilyParams, TimeSeries, Trajectory, evolve_grid, evolve_multipeakon, flow_map
from .functionals import (
    EnergyProfile,
    WeightPsi,
    energy_DP,
    psi_prime,
    rho_prime,
    x_gamma,
)
from .states import PeakonState, particle_fields, quadrature_rule, single_peakon

ResidualSeries = TimeSeries


# ---------------------------------------------------------------------------
# modulation


@dataclass
class ModulationPath:
    times: np.ndarray
    x: np.ndarray
    lam: np.ndarray
    xdot: np.ndarray

    def __post_init__(self):
        n = len(self.times)
        if not (len(self.x) == len(self.lam) == len(self.xdot) == n):
            raise ValueError("modulation columns differ in length")
        if not np.all(np.isfinite(self.x)):
            raise ValueError("non-finite modulation centre")

    def to_series(self) -> TimeSeries:
        return TimeSeries({"t": self.times, "x": self.x, "lambda": self.lam, "xdot": self.xdot})


def _bisect(f, lo, hi, tol=1e-14, max_iter=200):
    flo = f(lo)
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if fm == 0:
            return mid
        if (fm > 0) == (flo > 0):
            lo, flo = mid, fm
        else:
            hi = mid
        if hi - lo < tol * max(1.0, abs(mid)):
            break
    return 0.5 * (lo + hi)


def _grid_peak(values: np.ndarray, grid, deriv_values: np.ndarray, second: np.ndarray) -> float:
    j = int(np.argmax(values))
    n = grid.N
    f0, fm, fp = values[j], values[(j - 1) % n], values[(j + 1) % n]
    denom = fm - 2 * f0 + fp
    x = grid.x[j] + (0.5 * (fm - fp) / denom * grid.dx if denom < 0 else 0.0)
    # polish on the trigonometric interpolant of the derivative
    for _ in range(8):
        d1 = spectral_interp(deriv_values, grid, [x])[0]
        d2 = spectral_interp(second, grid, [x])[0]
        if d2 >= 0:
            break
        step = d1 / d2
        x -= step
        if abs(step) < 1e-15:
            break
    return float(x)


def modulation_argmax(obj) -> float:
    """Location of the maximum of ``v``.

    ``obj`` is either ``v`` itself as a :class:`GridFn`, or a
    :class:`PeakonState`, in which case ``v`` is evaluated in closed form and
    the maximiser is the root of ``v_x``.
    """
    if isinstance(obj, GridFn):
        v = obj.values
        if np.ptp(v) == 0:
            raise ValueError("v is flat; no maximum to track")
        vx = deriv_array(v, obj.grid, 1)
        vxx = deriv_array(v, obj.grid, 2)
        return _grid_peak(v, obj.grid, vx, vxx)
    s = obj
    if s.n == 0 or not np.any(s.p):
        raise ValueError("v is flat; no maximum to track")
    cand = np.concatenate([s.q, np.linspace(s.q[0] - 3, s.q[-1] + 3, 64 * s.n + 64)])
    cand.sort()
    vals = particle_fields(s, cand).v
    j = int(np.argmax(vals))
    lo, hi = cand[max(j - 1, 0)], cand[min(j + 1, cand.size - 1)]

    def vx(x):
        return particle_fields(s, [x]).vx[0]

    if vx(lo) <= 0 or vx(hi) >= 0:
        return float(cand[j])
    return float(_bisect(vx, lo, hi))


def _rho_prime_kernel(grid):
    r = np.mod(grid.x - grid.x[0] + 0.5 * grid.L, grid.L) - 0.5 * grid.L
    return rho_prime(r)


def orthogonality_function(obj, x):
    """``F(x) = int v(s) rho'(s - x) ds``."""
    x = np.atleast_1d(np.asarray(x, float))
    if isinstance(obj, GridFn):
        g = obj.grid
        ker = _rho_prime_kernel(g)
        # F at the nodes is a circular cross-correlation
        nodes = np.fft.irfft(np.fft.rfft(obj.values) * np.conj(np.fft.rfft(ker)), n=g.N) * g.dx
        return spectral_interp(nodes, g, x)
    s = obj
    out = np.empty(x.size)
    for i, xi in enumerate(x):
        brk = PeakonState(np.unique(np.concatenate([s.q, [xi]])),
                          np.zeros(np.unique(np.concatenate([s.q, [xi]])).size))
        nodes, w = quadrature_rule(brk, margin=40.0, panel=1.0, order=16)
        out[i] = np.sum(w * particle_fields(s, nodes).v * rho_prime(nodes - xi))
    return out


def modulation_orthogonality(obj, x_init: float, width: float = 0.5) -> float:
    """Root of ``F(x) = int v rho'(. - x)`` next to ``x_init``.

    Falls back to ``x_init`` (with a warning) when no sign change is found.
    """
    def f(x):
        return orthogonality_function(obj, [x])[0]

    lo, hi = x_init - width, x_init + width
    flo, fhi = f(lo), f(hi)
    if flo == 0:
        return lo
    if fhi == 0:
        return hi
    if (flo > 0) == (fhi > 0):
        warnings.warn("orthogonality condition has no sign change; using x_init",
                      RuntimeWarning)
        return float(x_init)
    return float(_bisect(f, lo, hi, tol=1e-13))


def amplitude(obj) -> float:
    """``lambda = max u``."""
    if isinstance(obj, GridFn):
        u = obj.values
        ux = deriv_array(u, obj.grid, 1)
        uxx = deriv_array(u, obj.grid, 2)
        x = _grid_peak(u, obj.grid, ux, uxx)
        return float(max(spectral_interp(u, obj.grid, [x])[0], np.max(u)))
    # u is convex between particles, so the maximum sits on one of them
    return float(np.max(particle_fields(obj, obj.q).u))


def smoothed_rate(t: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Derivative from a five-point least-squares stencil; one-sided at the ends."""
    t = np.asarray(t, float)
    x = np.asarray(x, float)
    if t.size < 5:
        return np.gradient(x, t) if t.size > 1 else np.zeros_like(x)
    h = np.diff(t)
    out = np.gradient(x, t, edge_order=2)
    if np.allclose(h, h[0], rtol=1e-9, atol=0):
        out[2:-2] = (-2 * x[:-4] - x[1:-3] + x[3:-1] + 2 * x[4:]) / (10.0 * h[0])
    return out


def track_modulation(traj: Trajectory, method: str = "argmax") -> ModulationPath:
    xs, lams = [], []
    for s in traj.states:
        if isinstance(s, GridFn):
            v = s.with_values(helmholtz_inv_array(s.values, s.grid, 2.0))
        else:
            v = s
        x = modulation_argmax(v)
        if method == "orthogonality":
            x = modulation_orthogonality(v, x)
        elif method != "argmax":
            raise ValueError(f"unknown modulation method {method!r}")
        xs.append(x)
        lams.append(amplitude(s))
    xs = np.array(xs)
    return ModulationPath(traj.times.copy(), xs, np.array(lams), smoothed_rate(traj.times, xs))


# ---------------------------------------------------------------------------
# jump law


def trailing_jump(s: PeakonState):
    """Jump ``a`` of ``u_x`` at the rightmost particle and ``u`` there."""
    if s.n == 0:
        raise ValueError("state has no particles")
    f = particle_fields(s, [s.q[-1]])
    return float(f.ux_left[0] - f.ux_right[0]), float(f.u[0])


def _central_rate(y: np.ndarray, dt: float) -> np.ndarray:
    """Fourth-order central differences; NaN at the two points at each end."""
    out = np.full(y.size, np.nan)
    if y.size >= 5:
        out[2:-2] = (y[:-4] - 8 * y[1:-3] + 8 * y[3:-1] - y[4:]) / (12.0 * dt)
    return out


def _uniform_step(times: np.ndarray) -> float:
    h = np.diff(times)
    if h.size == 0 or not np.allclose(h, h[0], rtol=1e-9, atol=0):
        raise ValueError("diagnostic needs uniformly spaced output times")
    return float(h[0])


def jump_law_residual(traj: Trajectory, b: float | None = None) -> ResidualSeries:
    """Compare ``da/dt`` with ``(u^2 - u_x^2)(q_N-)`` and fit ``da/dt = kappa * rhs``.

    The fitted ``kappa`` is repeated in its own column.
    """
    dt = _uniform_step(traj.times)
    a, rhs = [], []
    for s in traj.states:
        f = particle_fields(s, [s.q[-1]])
        a.append(f.ux_left[0] - f.ux_right[0])
        rhs.append(f.u[0] ** 2 - f.ux_left[0] ** 2)
    a = np.array(a)
    rhs = np.array(rhs)
    da = _central_rate(a, dt)
    ok = np.isfinite(da)
    denom = float(np.sum(rhs[ok] ** 2))
    kappa = float(np.sum(da[ok] * rhs[ok]) / denom) if denom > 0 else 0.0
    resid = np.where(ok, da - kappa * rhs, 0.0)
    return TimeSeries({"t": traj.times, "a": a, "da_dt": np.nan_to_num(da), "rhs": rhs,
                       "residual": resid, "kappa": np.full(a.size, kappa)})


# ---------------------------------------------------------------------------
# identities on grid trajectories


def flux_terms(u: GridFn, g, g_prime=None):
    """Energy ``int (4v^2+5v_x^2+v_xx^2) g`` and the four flux integrals."""
    grid = u.grid
    uv = u.values
    if isinstance(g, WeightPsi):
        gv, gp = g(grid.x), g.prime(grid.x)
    else:
        gv = g.values if isinstance(g, GridFn) else np.asarray(g, float)
        if g_prime is None:
            gp = deriv_array(gv, grid, 1)
        else:
            gp = g_prime.values if isinstance(g_prime, GridFn) else np.asarray(g_prime, float)
    v = helmholtz_inv_array(uv, grid, 2.0)
    vx = deriv_array(v, grid, 1)
    vxx = 4.0 * v - uv
    h = helmholtz_inv_array(uv * uv, grid, 1.0)
    hx = deriv_array(h, grid, 1)
    dx = grid.dx
    energy = float(np.sum((4 * v * v + 5 * vx * vx + vxx * vxx) * gv) * dx)
    return energy, {
        "u3": float(np.sum(uv**3 * gp) * dx),
        "vh": float(np.sum(v * h * gp) * dx),
        "vu2": float(np.sum(v * uv * uv * gp) * dx),
        "vxhx": float(np.sum(vx * hx * gp) * dx),
    }


def flux_identity_residual(traj: Trajectory, g, coeff_vh: float, g_prime=None) -> ResidualSeries:
    """``d/dt int E g - [2/3 int u^3 g' + c int v h g' - 4 int v u^2 g' + int v_x h_x g']``.

    ``g`` is a :class:`WeightPsi` (exact derivative) or a grid function whose
    derivative is taken spectrally unless ``g_prime`` is supplied.
    """
    if traj.kind != "grid":
        raise ValueError("flux identity needs a grid trajectory")
    dt = _uniform_step(traj.times)
    energy, rhs = [], []
    for s in traj.states:
        e, t = flux_terms(s, g, g_prime)
        energy.append(e)
        rhs.append(2.0 / 3.0 * t["u3"] + coeff_vh * t["vh"] - 4.0 * t["vu2"] + t["vxhx"])
    energy = np.array(energy)
    rhs = np.array(rhs)
    rate = _central_rate(energy, dt)
    ok = np.isfinite(rate)
    return TimeSeries({"t": traj.times[ok], "dE_dt": rate[ok], "rhs": rhs[ok],
                       "residual": rate[ok] - rhs[ok]})


def transport_identity_residual(traj: Trajectory, b: float, sample_x, substeps: int = 4) -> float:
    """Max over samples and output times of ``|y0(x) - y(t, q) q_x^b| / |y0|_inf``."""
    if traj.kind != "grid":
        raise ValueError("transport identity needs a grid trajectory")
    sample_x = np.atleast_1d(np.asarray(sample_x, float))
    grid = traj.states[0].grid
    ys = [s.values - deriv_array(s.values, grid, 2) for s in traj.states]
    scale = float(np.max(np.abs(ys[0])))
    if scale == 0:
        return 0.0
    y0 = spectral_interp(ys[0], grid, sample_x)
    fm = flow_map(traj, sample_x, substeps=substeps)
    worst = 0.0
    for j in range(len(traj)):
        q = np.array([fm[f"q_{i}"][j] for i in range(sample_x.size)])
        qx = np.array([fm[f"qx_{i}"][j] for i in range(sample_x.size)])
        yt = spectral_interp(ys[j], grid, q)
        worst = max(worst, float(np.max(np.abs(y0 - yt * qx**b))))
    return worst / scale


# ---------------------------------------------------------------------------
# almost monotonicity


def monotonicity_audit(traj: Trajectory, t0: float, R_list, gamma: float = 0.0,
                       z_path_fraction: float = 2.0 / 3.0,
                       path: ModulationPath | None = None) -> ResidualSeries:
    """Defects of the right/left localized functionals around ``t0``.

    With ``f = z_path_fraction`` the weight is centred at
    ``x(t0) +- R - f (x(t0) - x(t))``.  ``D_right(R)`` is the largest
    ``I(t0) - I(t)`` over ``t <= t0`` for the ``+R`` functional and
    ``D_left(R)`` the largest ``I(t) - I(t0)`` over ``t >= t0`` for ``-R``.
    ``f = 1`` gives the co-moving functional.
    """
    if not (0 < z_path_fraction <= 1):
        raise ValueError("z_path_fraction must lie in (0, 1]")
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    path = path if path is not None else track_modulation(traj)
    times = traj.times
    j0 = int(np.argmin(np.abs(times - t0)))
    x0 = path.x[j0]
    profiles = [EnergyProfile.of(s) for s in traj.states]
    R_list = np.asarray(R_list, float)
    d_right, d_left = [], []
    for R in R_list:
        shift = x0 - z_path_fraction * (x0 - path.x)
        right = np.array([p.localized(shift[j] + R, gamma) for j, p in enumerate(profiles)])
        left = np.array([p.localized(shift[j] - R, gamma) for j, p in enumerate(profiles)])
        d_right.append(float(np.max(right[j0] - right[: j0 + 1])))
        d_left.append(float(np.max(left[j0:] - left[j0])))
    d_right = np.array(d_right)
    d_left = np.array(d_left)
    slope, k0 = fit_exponential(R_list, np.maximum(d_right, d_left))
    return TimeSeries({"R": R_list, "D_right": d_right, "D_left": d_left,
                       "slope": np.full(R_list.size, slope), "K0": np.full(R_list.size, k0)})


def fit_exponential(R, D):
    """Least-squares fit ``ln D = ln K0 + slope * R`` over the positive entries."""
    R = np.asarray(R, float)
    D = np.asarray(D, float)
    ok = D > 0
    if np.count_nonzero(ok) < 2:
        return float("nan"), float("nan")
    slope, intercept = np.polyfit(R[ok], np.log(D[ok]), 1)
    # smallest K0 that dominates every point at the fitted slope
    k0 = float(np.max(D[ok] * np.exp(-slope * R[ok])))
    return float(slope), k0


def rigid_peakon_defect(c: float, R: float, fraction: float, elapsed: float) -> float:
    """``I(t0) - I(t0 - elapsed)`` for an exact peakon and ``gamma = 0``.

    The weight lags the crest by ``R + (1 - f) c * elapsed`` at the earlier time.
    """
    prof = EnergyProfile.of(single_peakon(c))
    return prof.localized(R) - prof.localized(R + (1.0 - fraction) * c * elapsed)


def decay_tail(traj: Trajectory, R_list, gamma: float = 0.0,
               path: ModulationPath | None = None) -> TimeSeries:
    """``sup_t <E + gamma y, 1_{|x - x(t)| > R}>`` for each ``R``."""
    path = path if path is not None else track_modulation(traj)
    profiles = [EnergyProfile.of(s) for s in traj.states]
    R_list = np.asarray(R_list, float)
    tails = []
    for R in R_list:
        worst = 0.0
        for j, p in enumerate(profiles):
            outside = np.abs(p.x - path.x[j]) > R
            val = float(np.sum(p.energy[outside]))
            if gamma:
                val += gamma * float(np.sum(p.y_mass[np.abs(p.y_pos - path.x[j]) > R]))
            worst = max(worst, val)
        tails.append(worst)
    tails = np.array(tails)
    slope, k0 = fit_exponential(R_list, tails)
    return TimeSeries({"R": R_list, "tail": tails, "slope": np.full(R_list.size, slope),
                       "C": np.full(R_list.size, k0)})


# ---------------------------------------------------------------------------
# stability


def _h1_on(x, w, wx, mask, h):
    return float(np.sqrt(np.sum((w[mask] ** 2 + wx[mask] ** 2)) * h))


def stability_metrics(traj: Trajectory, window_A: float, theta: float, z: float,
                      spacing: float = 0.01, gamma_level: float | None = None,
                      path: ModulationPath | None = None) -> TimeSeries:
    """Per output time: modulation, windowed H^1 errors and left tail mass.

    Errors compare ``u`` with ``lambda(t) exp(-|x - x(t)|)`` on a fixed lattice
    of the given spacing, summing over the lattice nodes inside each window.
    ``x_gamma`` uses ``gamma_level`` (default: half the energy of the first
    state), together with ``(int u^2 psi'(. - x_gamma))^{1/2} / 50``.
    """
    path = path if path is not None else track_modulation(traj)
    first = traj.states[0]
    if gamma_level is None:
        gamma_level = 0.5 * energy_DP(first)
    cols = {k: [] for k in ("e_local", "e_right", "tail_mass_left", "x_gamma", "td6_bound")}
    for j, s in enumerate(traj.states):
        t = traj.times[j]
        xc, lam = path.x[j], path.lam[j]
        lo = min(z, xc - window_A) - 40.0
        hi = _right_edge(s) + 40.0
        nodes = spacing * np.arange(np.floor(lo / spacing), np.ceil(hi / spacing) + 1)
        u, ux = _u_and_ux(s, nodes)
        d = nodes - xc
        phi = np.exp(-np.abs(d))
        w = u - lam * phi
        wx = ux + lam * np.sign(d) * phi
        local = nodes >= xc - window_A
        right = (nodes >= theta * t) | (nodes <= z)
        cols["e_local"].append(_h1_on(nodes, w, wx, local, spacing))
        cols["e_right"].append(_h1_on(nodes, w, wx, right, spacing))
        cols["tail_mass_left"].append(_left_mass(s, z))
        prof = EnergyProfile.of(s)
        xg = x_gamma(s, gamma_level, profile=prof)
        cols["x_gamma"].append(xg)
        cols["td6_bound"].append(np.sqrt(_u2_weighted(s, xg)) / 50.0)
    out = {"t": traj.times, "lambda": path.lam, "x": path.x, "xdot": path.xdot}
    out.update({k: np.array(v) for k, v in cols.items()})
    out["xdot_gamma"] = smoothed_rate(traj.times, out["x_gamma"])
    return TimeSeries(out)


def _right_edge(s) -> float:
    if isinstance(s, GridFn):
        return float(s.grid.x[-1]) - 40.0
    return float(s.q[-1])


def _u_and_ux(s, nodes):
    if isinstance(s, GridFn):
        ux = deriv_array(s.values, s.grid, 1)
        inside = (nodes >= s.grid.x[0]) & (nodes <= s.grid.x[-1])
        u = np.zeros(nodes.size)
        d = np.zeros(nodes.size)
        u[inside] = spectral_interp(s.values, s.grid, nodes[inside])
        d[inside] = spectral_interp(ux, s.grid, nodes[inside])
        return u, d
    f = particle_fields(s, nodes)
    return f.u, f.ux


def _left_mass(s, z) -> float:
    if isinstance(s, GridFn):
        y = s.values - deriv_array(s.values, s.grid, 2)
        return float(np.sum(y[s.grid.x < z]) * s.grid.dx)
    return float(2.0 * np.sum(s.p[s.q < z]))


def _u2_weighted(s, xg) -> float:
    if isinstance(s, GridFn):
        return float(np.sum(s.values**2 * psi_prime(s.grid.x - xg)) * s.grid.dx)
    nodes, w = quadrature_rule(s)
    return float(np.sum(w * particle_fields(s, nodes).u ** 2 * psi_prime(nodes - xg)))


# ---------------------------------------------------------------------------
# trains


def _crests(s: PeakonState, count: int):
    """Positions and heights of the ``count`` highest local maxima of u over the particles."""
    f = particle_fields(s, s.q)
    u = f.u
    cand = np.flatnonzero((f.ux_left >= 0) & (f.ux_right <= 0))
    if cand.size < count:
        raise ValueError(f"found {cand.size} crests, expected {count}")
    top = np.sort(cand[np.argsort(u[cand])[-count:]])
    return s.q[top], u[top]


def track_train(traj: Trajectory, count: int) -> TimeSeries:
    """Follow the ``count`` highest crests: positions and heights, ordered by position.

    A crest is tracked as a local maximum of u among the particle positions,
    so the hand-over of momentum between a tall particle and small ones it
    runs into does not break the track.
    """
    if traj.kind != "particle":
        raise ValueError("train tracking works on particle trajectories")
    cols = {"t": traj.times}
    found = [_crests(s, count) for s in traj.states]
    pos = np.array([f[0] for f in found])
    lam = np.array([f[1] for f in found])
    for k in range(count):
        cols[f"x_{k}"] = pos[:, k]
        cols[f"lambda_{k}"] = lam[:, k]
        cols[f"xdot_{k}"] = smoothed_rate(traj.times, pos[:, k])
    return TimeSeries(cols)


# ---------------------------------------------------------------------------
# W^{1,1} distance and symmetry


def w11_norm(a, b) -> float:
    """``int |a - b| + |a_x - b_x|`` for two grid functions or two particle states."""
    if isinstance(a, GridFn):
        w = a.values - b.values
        wx = deriv_array(w, a.grid, 1)
        return float(np.sum(np.abs(w) + np.abs(wx)) * a.grid.dx)
    brk = np.unique(np.concatenate([a.q, b.q]))
    nodes, wts = quadrature_rule(PeakonState(brk, np.zeros(brk.size)))
    fa, fb = particle_fields(a, nodes), particle_fields(b, nodes)
    return float(np.sum(wts * (np.abs(fa.u - fb.u) + np.abs(fa.ux - fb.ux))))


def fit_growth_rate(times, norms) -> float:
    """Smallest ``c`` with ``norms[t] <= exp(c t) norms[0]`` over ``t > 0``."""
    times = np.asarray(times, float)
    norms = np.asarray(norms, float)
    if norms[0] == 0:
        return 0.0
    ok = times > 0
    with np.errstate(divide="ignore"):
        rates = np.log(np.maximum(norms[ok], 1e-300) / norms[0]) / times[ok]
    return float(max(np.max(rates), 0.0)) if rates.size else 0.0


def reflect_negate(u):
    """``u -> -u(-x)``, exact on the node set of a grid centred at 0."""
    if isinstance(u, GridFn):
        if u.grid.center != 0:
            raise ValueError("reflection needs a grid centred at 0")
        return u.with_values(-np.roll(u.values[::-1], 1))
    return u.reflected()


def w11_contraction(u0a, u0b, b: float, T: float, dt: float = 0.01,
                    output_every: float = 0.1):
    """Evolve both data and fit the growth rate of their W^{1,1} distance.

    Grid functions use the grid solver, particle states the particle solver.
    Returns ``(fitted_c, series)``.
    """
    params = BFamilyParams(b)
    evolve = evolve_grid if isinstance(u0a, GridFn) else evolve_multipeakon
    ta = evolve(u0a, params, T, dt, output_every=output_every)
    tb = evolve(u0b, params, T, dt, output_every=output_every)
    norms = np.array([w11_norm(a, c) for a, c in zip(ta.states, tb.states)])
    rate = fit_growth_rate(ta.times, norms)
    return rate, TimeSeries({"t": ta.times, "w11": norms})
