"""Time evolution for the b-family.

Two integrators share the :class:`Trajectory` container:

* the multipeakon ODE, exact for particle states,
* a Fourier method-of-lines solver for the nonlocal form
  ``u_t + u u_x + d_x (1 - d_x^2)^{-1} (b/2 u^2 + (3-b)/2 u_x^2) = 0``.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .domain import GridFn, UniformGrid, make_grid
from .states import PeakonState, particle_fields


class SolverAbort(RuntimeError):
    """Raised when an integrator cannot continue; carries the partial trajectory."""

    def __init__(self, message: str, trajectory: "Trajectory | None" = None):
        super().__init__(message)
        self.trajectory = trajectory


@dataclass(frozen=True)
class BFamilyParams:
    b: float = 3.0
    filter_strength: float = 0.0
    cfl: float = 0.5

    def __post_init__(self):
        if not np.isfinite(self.b):
            raise ValueError("b must be finite")
        if self.filter_strength < 0:
            raise ValueError("filter_strength must be >= 0")
        if not (0 < self.cfl <= 1):
            raise ValueError("cfl must lie in (0, 1]")


# ---------------------------------------------------------------------------
# time series and trajectories


@dataclass
class TimeSeries:
    """Named numeric columns sharing one length."""

    columns: dict = field(default_factory=dict)

    def __post_init__(self):
        lengths = {len(v) for v in self.columns.values()}
        if len(lengths) > 1:
            raise ValueError(f"columns differ in length: {lengths}")
        self.columns = {k: np.asarray(v, float) for k, v in self.columns.items()}

    def __getitem__(self, key):
        return self.columns[key]

    def __contains__(self, key):
        return key in self.columns

    @property
    def names(self):
        return list(self.columns)

    def __len__(self):
        return len(next(iter(self.columns.values()))) if self.columns else 0

    def to_csv(self, path) -> None:
        data = np.column_stack([self.columns[k] for k in self.names]) if self.columns else np.empty((0, 0))
        np.savetxt(path, data, delimiter=",", header=",".join(self.names),
                   comments="", fmt="%.17g")

    @classmethod
    def from_csv(cls, path) -> "TimeSeries":
        with open(path) as fh:
            names = fh.readline().strip().split(",")
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        if data.size == 0:
            return cls({n: np.empty(0) for n in names})
        return cls({n: data[:, i] for i, n in enumerate(names)})


@dataclass
class Trajectory:
    times: np.ndarray
    states: list
    params: BFamilyParams
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, float)
        if len(self.times) != len(self.states):
            raise ValueError("times and states differ in length")
        if self.times.size > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")
        kinds = {type(s) for s in self.states}
        if len(kinds) > 1:
            raise ValueError("mixed state representations")

    @property
    def kind(self) -> str:
        if not self.states:
            return "empty"
        return "particle" if isinstance(self.states[0], PeakonState) else "grid"

    def __len__(self):
        return len(self.states)

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        head = {
            "kind": self.kind,
            "params": {"b": self.params.b, "filter_strength": self.params.filter_strength,
                       "cfl": self.params.cfl},
            "meta": _jsonable(self.meta),
            "times": self.times.tolist(),
        }
        arrays = {}
        if self.kind == "grid":
            g = self.states[0].grid
            head["grid"] = {"L": g.L, "N": g.N, "center": g.center}
            arrays["u"] = np.array([s.values for s in self.states])
        elif self.kind == "particle":
            arrays["counts"] = np.array([s.n for s in self.states])
            arrays["q"] = np.concatenate([s.q for s in self.states])
            arrays["p"] = np.concatenate([s.p for s in self.states])
        np.savez(d / "states.npz", **arrays)
        (d / "trajectory.json").write_text(json.dumps(head, indent=1))

    @classmethod
    def load(cls, directory) -> "Trajectory":
        d = Path(directory)
        head = json.loads((d / "trajectory.json").read_text())
        data = np.load(d / "states.npz")
        params = BFamilyParams(**head["params"])
        if head["kind"] == "grid":
            gd = head["grid"]
            grid = make_grid(gd["L"], int(gd["N"]), gd.get("center", 0.0))
            states = [GridFn(grid, row) for row in data["u"]]
        elif head["kind"] == "particle":
            cuts = np.cumsum(data["counts"])[:-1]
            states = [PeakonState(q, p) for q, p in
                      zip(np.split(data["q"], cuts), np.split(data["p"], cuts))]
        else:
            states = []
        return cls(np.asarray(head["times"]), states, params, head.get("meta", {}))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


# ---------------------------------------------------------------------------
# multipeakon ODE


def _peakon_rhs(q: np.ndarray, p: np.ndarray, b: float):
    d = q[:, None] - q[None, :]
    k = np.exp(-np.abs(d))
    dq = k @ p
    # sgn(0) = 0 on the diagonal: mean of the one-sided slopes at the particle
    dp = (b - 1.0) * p * ((np.sign(d) * k) @ p)
    return dq, dp


def multipeakon_rhs(s: PeakonState, b: float):
    """``(dq/dt, dp/dt)`` of the multipeakon reduction."""
    return _peakon_rhs(s.q, s.p, b)


def _rk4(q, p, b, dt):
    k1q, k1p = _peakon_rhs(q, p, b)
    k2q, k2p = _peakon_rhs(q + 0.5 * dt * k1q, p + 0.5 * dt * k1p, b)
    k3q, k3p = _peakon_rhs(q + 0.5 * dt * k2q, p + 0.5 * dt * k2p, b)
    k4q, k4p = _peakon_rhs(q + dt * k3q, p + dt * k3p, b)
    return (q + dt / 6.0 * (k1q + 2 * k2q + 2 * k3q + k4q),
            p + dt / 6.0 * (k1p + 2 * k2p + 2 * k3p + k4p))


MIN_GAP = 1e-10
MIN_DT = 1e-14


def _acceptable(q_new, p_new, guard_sign: np.ndarray | None) -> bool:
    if not (np.all(np.isfinite(q_new)) and np.all(np.isfinite(p_new))):
        return False
    if q_new.size > 1 and np.min(np.diff(q_new)) < MIN_GAP:
        return False
    if guard_sign is not None and np.any(p_new * guard_sign <= 0):
        return False
    return True


def _advance(q, p, b, dt, guard_sign, stats):
    """One RK4 step of size ``dt``, split in halves until acceptable."""
    if dt < MIN_DT:
        raise SolverAbort(f"time step underflow (dt={dt:.3g}) near a collision")
    q_new, p_new = _rk4(q, p, b, dt)
    if _acceptable(q_new, p_new, guard_sign):
        stats["steps"] += 1
        return q_new, p_new
    stats["rejected"] += 1
    q_half, p_half = _advance(q, p, b, 0.5 * dt, guard_sign, stats)
    return _advance(q_half, p_half, b, 0.5 * dt, guard_sign, stats)


def step_multipeakon(s: PeakonState, params: BFamilyParams, dt: float) -> PeakonState:
    """Classic RK4 step with halving on particle crossing or sign change.

    Negative ``dt`` integrates backwards.
    """
    if dt == 0:
        raise ValueError("dt must be nonzero")
    guard = np.sign(s.p) if (params.b >= 1 and s.positive) else None
    stats = {"steps": 0, "rejected": 0}
    q, p = _advance(s.q, s.p, params.b, abs(dt), guard, stats) if dt > 0 else \
        _advance_back(s, params, -dt, guard, stats)
    return PeakonState(q, p)


def _advance_back(s, params, dt, guard, stats):
    # reversing time is the same as reflecting q, which keeps the ordering check valid
    q, p = _advance(-s.q[::-1], s.p[::-1], params.b, dt, guard, stats)
    return -q[::-1], p[::-1]


def evolve_multipeakon(s0: PeakonState, params: BFamilyParams, T: float, dt: float,
                       output_every: float | None = None) -> Trajectory:
    """Integrate the multipeakon ODE up to time ``T`` with nominal step ``dt``."""
    if T <= 0 or dt <= 0:
        raise ValueError("T and dt must be positive")
    out_dt = output_every if output_every else dt
    n_out = max(1, int(round(T / out_dt)))
    out_dt = T / n_out
    sub = max(1, int(np.ceil(out_dt / dt - 1e-9)))
    h = out_dt / sub
    guard = np.sign(s0.p) if (params.b >= 1 and s0.positive) else None
    stats = {"steps": 0, "rejected": 0}
    times, states = [0.0], [s0]
    q, p = s0.q.copy(), s0.p.copy()
    for k in range(1, n_out + 1):
        try:
            for _ in range(sub):
                q, p = _advance(q, p, params.b, h, guard, stats)
        except SolverAbort as exc:
            traj = Trajectory(times, states, params, {"solver": "particle", **stats})
            raise SolverAbort(str(exc), traj) from None
        times.append(k * out_dt)
        states.append(PeakonState(q.copy(), p.copy()))
    meta = {"solver": "particle", "dt": h, **stats}
    return Trajectory(np.array(times), states, params, meta)


# ---------------------------------------------------------------------------
# grid solver


def _filter_symbol(grid: UniformGrid, strength: float) -> np.ndarray:
    k = grid.k
    return np.exp(-36.0 * strength * (np.abs(k) / k[-1]) ** 36)


def _grid_rhs_values(u: np.ndarray, grid: UniformGrid, b: float) -> np.ndarray:
    k = grid.k
    ik = 1j * k
    ik[-1] = 0.0
    uh = np.fft.rfft(u)
    ux = np.fft.irfft(ik * uh, n=grid.N)
    w = 0.5 * b * u * u + 0.5 * (3.0 - b) * ux * ux
    flux = np.fft.irfft(np.fft.rfft(w) * ik / (1.0 + k * k), n=grid.N)
    return -u * ux - flux


def grid_rhs(u: GridFn, b: float, filter_strength: float = 0.0) -> GridFn:
    """``-u u_x - d_x (1 - d_x^2)^{-1}(b/2 u^2 + (3-b)/2 u_x^2)``."""
    rhs = _grid_rhs_values(u.values, u.grid, b)
    if filter_strength > 0:
        rhs = np.fft.irfft(np.fft.rfft(rhs) * _filter_symbol(u.grid, filter_strength),
                           n=u.grid.N)
    return u.with_values(rhs)


def evolve_grid(u0: GridFn, params: BFamilyParams, T: float, dt: float,
                output_every: float | None = None, blowup_factor: float = 10.0) -> Trajectory:
    """RK4 method of lines; the step obeys ``dt <= cfl * dx / max|u|``."""
    if T <= 0 or dt <= 0:
        raise ValueError("T and dt must be positive")
    grid = u0.grid
    b = params.b
    out_dt = output_every if output_every else dt
    n_out = max(1, int(round(T / out_dt)))
    out_dt = T / n_out
    umax0 = float(np.max(np.abs(u0.values)))
    limit = blowup_factor * umax0 if umax0 > 0 else np.inf
    filt = _filter_symbol(grid, params.filter_strength) if params.filter_strength > 0 else None
    u = u0.values.copy()
    times, states = [0.0], [u0]
    steps = 0

    def f(x):
        return _grid_rhs_values(x, grid, b)

    for k in range(1, n_out + 1):
        umax = float(np.max(np.abs(u)))
        h_cfl = params.cfl * grid.dx / umax if umax > 0 else np.inf
        sub = max(1, int(np.ceil(out_dt / min(dt, h_cfl) - 1e-9)))
        h = out_dt / sub
        for _ in range(sub):
            k1 = f(u)
            k2 = f(u + 0.5 * h * k1)
            k3 = f(u + 0.5 * h * k2)
            k4 = f(u + h * k3)
            u_new = u + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            if filt is not None:
                u_new = np.fft.irfft(np.fft.rfft(u_new) * filt, n=grid.N)
            steps += 1
            bad = not np.all(np.isfinite(u_new))
            if bad or np.max(np.abs(u_new)) > limit:
                reason = "non-finite values" if bad else "blow-up guard exceeded"
                traj = Trajectory(times, states, params,
                                  {"solver": "grid", "steps": steps, "abort": reason})
                raise SolverAbort(f"grid solver aborted at t~{times[-1]:.6g}: {reason}", traj)
            u = u_new
        times.append(k * out_dt)
        states.append(GridFn(grid, u.copy()))
    return Trajectory(np.array(times), states, params,
                      {"solver": "grid", "steps": steps, "dt_nominal": dt})


# ---------------------------------------------------------------------------
# characteristics


def _hermite(t0, t1, f0, f1, d0, d1, t):
    h = t1 - t0
    s = (t - t0) / h
    h00 = (1 + 2 * s) * (1 - s) ** 2
    h10 = s * (1 - s) ** 2
    h01 = s * s * (3 - 2 * s)
    h11 = s * s * (s - 1)
    return h00 * f0 + h10 * h * d0 + h01 * f1 + h11 * h * d1


class _GridVelocity:
    """u and u_x at arbitrary (t, x): cubic Hermite in time, trigonometric in space."""

    def __init__(self, traj: Trajectory):
        self.traj = traj
        st0 = traj.states[0]
        self.grid = st0.grid
        b = traj.params.b
        self.u = np.array([s.values for s in traj.states])
        self.ut = np.array([_grid_rhs_values(s.values, self.grid, b) for s in traj.states])
        self._cache = {}

    def _frame(self, j):
        if j not in self._cache:
            if len(self._cache) > 8:
                self._cache.clear()
            g = self.grid
            ik = 1j * g.k
            ik[-1] = 0.0
            cu = np.fft.rfft(self.u[j]) / g.N
            ct = np.fft.rfft(self.ut[j]) / g.N
            self._cache[j] = (cu, ik * cu, ct, ik * ct)
        return self._cache[j]

    def __call__(self, t, x):
        times = self.traj.times
        j = int(np.clip(np.searchsorted(times, t, side="right") - 1, 0, len(times) - 2))
        g = self.grid
        weights = np.full(g.k.size, 2.0)
        weights[0] = weights[-1] = 1.0
        phase = np.exp(1j * np.outer(x - g.x[0], g.k)) * weights
        vals = []
        for jj in (j, j + 1):
            vals.append([(phase @ c).real for c in self._frame(jj)])
        (u0, ux0, ut0, utx0), (u1, ux1, ut1, utx1) = vals
        t0, t1 = times[j], times[j + 1]
        return (_hermite(t0, t1, u0, u1, ut0, ut1, t),
                _hermite(t0, t1, ux0, ux1, utx0, utx1, t))


class _ParticleVelocity:
    def __init__(self, traj: Trajectory):
        self.traj = traj
        b = traj.params.b
        self.q = np.array([s.q for s in traj.states])
        self.p = np.array([s.p for s in traj.states])
        rates = [_peakon_rhs(s.q, s.p, b) for s in traj.states]
        self.dq = np.array([r[0] for r in rates])
        self.dp = np.array([r[1] for r in rates])

    def __call__(self, t, x):
        times = self.traj.times
        j = int(np.clip(np.searchsorted(times, t, side="right") - 1, 0, len(times) - 2))
        t0, t1 = times[j], times[j + 1]
        q = _hermite(t0, t1, self.q[j], self.q[j + 1], self.dq[j], self.dq[j + 1], t)
        p = _hermite(t0, t1, self.p[j], self.p[j + 1], self.dp[j], self.dp[j + 1], t)
        f = particle_fields(PeakonState(np.sort(q), p[np.argsort(q)]), x)
        return f.u, f.ux


def flow_map(traj: Trajectory, x0, substeps: int = 4) -> TimeSeries:
    """Characteristics ``q_t = u(t, q)`` and ``log q_x = int u_x(s, q(s)) ds``.

    Returns columns ``t``, then ``q_i`` and ``qx_i`` for each starting point.
    """
    if len(traj) < 2:
        raise ValueError("flow map needs at least two output times")
    x0 = np.atleast_1d(np.asarray(x0, float))
    vel = _GridVelocity(traj) if traj.kind == "grid" else _ParticleVelocity(traj)
    lo = hi = None
    if traj.kind == "grid":
        g = traj.states[0].grid
        lo, hi = g.x[0], g.x[0] + g.L

    def rhs(t, y):
        q = y[: x0.size]
        if lo is not None and (np.any(q < lo) or np.any(q > hi)):
            warnings.warn("characteristic left the periodic domain; clamped", RuntimeWarning)
            q = np.clip(q, lo, hi)
        u, ux = vel(t, q)
        return np.concatenate([u, ux])

    y = np.concatenate([x0, np.zeros(x0.size)])
    qs, logs = [x0.copy()], [np.zeros(x0.size)]
    times = traj.times
    for j in range(len(times) - 1):
        h = (times[j + 1] - times[j]) / substeps
        t = times[j]
        for _ in range(substeps):
            k1 = rhs(t, y)
            k2 = rhs(t + 0.5 * h, y + 0.5 * h * k1)
            k3 = rhs(t + 0.5 * h, y + 0.5 * h * k2)
            k4 = rhs(t + h, y + h * k3)
            y = y + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            t += h
        qs.append(y[: x0.size].copy())
        logs.append(y[x0.size:].copy())
    qs = np.array(qs)
    qx = np.exp(np.array(logs))
    cols = {"t": times}
    for i in range(x0.size):
        cols[f"q_{i}"] = qs[:, i]
        cols[f"qx_{i}"] = qx[:, i]
    return TimeSeries(cols)
