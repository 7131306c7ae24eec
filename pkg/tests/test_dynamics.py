import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from peakon_lab.domain import GridFn, deriv, helmholtz_inv, make_grid, sample
from peakon_lab.dynamics import (
    BFamilyParams,
    SolverAbort,
    TimeSeries,
    Trajectory,
    evolve_grid,
    evolve_multipeakon,
    flow_map,
    grid_rhs,
    multipeakon_rhs,
    step_multipeakon,
)
from peakon_lab.functionals import energy_CH, mass_M
from peakon_lab.states import PeakonState, mollify, single_peakon, state_to_grid

b_values = st.sampled_from([0.0, 1.0, 2.0, 3.0, 4.5])


def random_state(rng, n, spread=10.0):
    q = np.sort(rng.uniform(-spread, spread, n))
    return PeakonState(q, rng.uniform(0.2, 2.0, n))


@given(st.floats(0.1, 5), b_values)
def test_single_peakon_rhs(c, b):
    dq, dp = multipeakon_rhs(single_peakon(c, 1.0), b)
    assert dq[0] == c and dp[0] == 0.0


@given(st.floats(0.1, 10), b_values)
def test_pair_rhs(d, b):
    _, dp = multipeakon_rhs(PeakonState([0.0, d], [1.0, 1.0]), b)
    e = np.exp(-d)
    assert np.allclose(dp, [-(b - 1) * e, (b - 1) * e], rtol=1e-14, atol=1e-300)


@settings(max_examples=30)
@given(st.integers(0, 10**6), st.integers(1, 8))
def test_momenta_frozen_when_b_is_one(seed, n):
    s = random_state(np.random.default_rng(seed), n)
    _, dp = multipeakon_rhs(s, 1.0)
    assert np.all(dp == 0)


def test_single_peakon_steps_rigidly():
    s = single_peakon(1.0, 0.0)
    p = BFamilyParams(3.0)
    for _ in range(100):
        s = step_multipeakon(s, p, 0.1)
    assert abs(s.q[0] - 10.0) <= 1e-10 and abs(s.p[0] - 1.0) <= 1e-15


def test_overtaking_pair_keeps_order_and_conserves():
    s0 = PeakonState([0.0, 5.0], [2.0, 0.5])
    tr = evolve_multipeakon(s0, BFamilyParams(3.0), 50.0, 0.01, output_every=0.5)
    assert all(np.all(np.diff(s.q) > 0) for s in tr.states)
    assert all(s.positive for s in tr.states)
    masses = [mass_M(s) for s in tr.states]
    assert np.ptp(masses) <= 1e-10


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 6), st.sampled_from([2.0, 3.0]))
def test_time_reversal(seed, n, b):
    s0 = random_state(np.random.default_rng(seed), n)
    p = BFamilyParams(b)
    s = s0
    for _ in range(100):
        s = step_multipeakon(s, p, 0.01)
    for _ in range(100):
        s = step_multipeakon(s, p, -0.01)
    assert np.max(np.abs(s.q - s0.q)) <= 1e-9
    assert np.max(np.abs(s.p - s0.p)) <= 1e-9


def test_step_rejects_zero_dt():
    with pytest.raises(ValueError):
        step_multipeakon(single_peakon(1.0), BFamilyParams(), 0.0)


def test_params_validation():
    with pytest.raises(ValueError):
        BFamilyParams(b=np.inf)
    with pytest.raises(ValueError):
        BFamilyParams(cfl=2.0)
    with pytest.raises(ValueError):
        BFamilyParams(filter_strength=-1.0)


@settings(max_examples=20, deadline=None)
@given(st.floats(0.1, 1.0), st.floats(-5, 5), st.floats(0.5, 3))
def test_grid_rhs_is_dp_form_at_b3(amp, centre, width):
    g = make_grid(80, 1024)
    u = helmholtz_inv(sample(lambda x: amp * np.exp(-((x - centre) / width) ** 2), g), 1.0)
    ux = deriv(u).values
    expected = -u.values * ux - 1.5 * deriv(helmholtz_inv(u * u.values, 1.0)).values
    assert np.max(np.abs(grid_rhs(u, 3.0).values - expected)) <= 1e-10


def test_grid_rhs_of_zero():
    g = make_grid(10, 32)
    assert np.all(grid_rhs(GridFn(g, np.zeros(g.N)), 3.0).values == 0)


def test_mollified_peakon_travels():
    c = 1.0
    g = make_grid(40, 2**14)
    errs = []
    for n in (8, 16, 32):
        u = mollify(state_to_grid(single_peakon(c), g), n)
        r = grid_rhs(u, 3.0).values + c * deriv(u).values
        errs.append(float(np.sum(np.abs(r)) * g.dx))
    assert errs[0] > errs[1] > errs[2]


def test_zero_data_stays_zero():
    g = make_grid(20, 64)
    tr = evolve_grid(GridFn(g, np.zeros(g.N)), BFamilyParams(3.0), 1.0, 0.1, output_every=0.5)
    assert all(np.all(s.values == 0) for s in tr.states)


def _smooth(g, amp=0.2, width=4.0):
    return helmholtz_inv(sample(lambda x: amp * np.exp(-0.5 * (x / width) ** 2), g), 1.0)


def test_grid_mass_conserved():
    g = make_grid(200, 2048)
    tr = evolve_grid(_smooth(g), BFamilyParams(3.0), 5.0, 0.02, output_every=1.0)
    m = np.array([mass_M(s) for s in tr.states])
    assert np.max(np.abs(m - m[0])) / m[0] <= 1e-8


def test_grid_ch_energy_under_refinement():
    drifts = []
    for N in (1024, 2048):
        g = make_grid(200, N)
        tr = evolve_grid(_smooth(g), BFamilyParams(2.0), 20.0, 0.02, output_every=2.0)
        e = np.array([energy_CH(s) for s in tr.states])
        drifts.append(np.max(np.abs(e - e[0])) / e[0])
    assert max(drifts) <= 1e-6


def test_grid_solver_aborts_with_partial_trajectory():
    g = make_grid(40, 512)
    u0 = helmholtz_inv(sample(lambda x: -8 * x * np.exp(-0.5 * x**2), g), 1.0)
    with pytest.raises(SolverAbort) as info:
        evolve_grid(u0, BFamilyParams(3.0), 5.0, 0.01, output_every=0.1)
    tr = info.value.trajectory
    assert tr is not None and len(tr) >= 1 and tr.times[0] == 0.0


def test_evolve_rejects_bad_times():
    with pytest.raises(ValueError):
        evolve_multipeakon(single_peakon(1.0), BFamilyParams(), -1.0, 0.1)


def test_flow_map_initial_values_and_rest_state():
    g = make_grid(20, 64)
    tr = evolve_grid(GridFn(g, np.zeros(g.N)), BFamilyParams(3.0), 1.0, 0.1, output_every=0.25)
    fm = flow_map(tr, [-1.0, 2.0])
    assert fm["q_0"][0] == -1.0 and fm["qx_1"][0] == 1.0
    assert np.all(fm["q_1"] == 2.0) and np.all(fm["qx_0"] == 1.0)


def test_flow_map_follows_peak():
    tr = evolve_multipeakon(single_peakon(1.5, 0.0), BFamilyParams(3.0), 4.0, 0.01, output_every=0.5)
    fm = flow_map(tr, [0.0])
    assert np.max(np.abs(fm["q_0"] - 1.5 * fm["t"])) <= 1e-10


def test_trajectory_round_trip(tmp_path):
    s0 = PeakonState([0.0, 3.0], [1.0, 0.4])
    tr = evolve_multipeakon(s0, BFamilyParams(3.0), 1.0, 0.1, output_every=0.5)
    tr.save(tmp_path / "p")
    back = Trajectory.load(tmp_path / "p")
    assert back.kind == "particle" and np.array_equal(back.times, tr.times)
    assert all(np.array_equal(a.q, b.q) and np.array_equal(a.p, b.p)
               for a, b in zip(tr.states, back.states))
    g = make_grid(40, 128)
    tg = evolve_grid(_smooth(g), BFamilyParams(2.0), 1.0, 0.1, output_every=0.5)
    tg.save(tmp_path / "g")
    bg = Trajectory.load(tmp_path / "g")
    assert bg.kind == "grid" and bg.params == tg.params
    assert all(np.array_equal(a.values, b.values) for a, b in zip(tg.states, bg.states))


def test_trajectory_validation():
    with pytest.raises(ValueError):
        Trajectory([0.0, 0.0], [single_peakon(1.0)] * 2, BFamilyParams())
    with pytest.raises(ValueError):
        Trajectory([0.0], [], BFamilyParams())


@settings(max_examples=20, deadline=None)
@given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=1, max_size=20))
def test_time_series_csv_is_lossless(tmp_path_factory, values):
    path = tmp_path_factory.mktemp("ts") / "s.csv"
    ts = TimeSeries({"t": np.arange(len(values)), "v": values})
    ts.to_csv(path)
    back = TimeSeries.from_csv(path)
    assert back.names == ["t", "v"]
    assert np.array_equal(back["v"], np.asarray(values, float))


def test_time_series_rejects_ragged_columns():
    with pytest.raises(ValueError):
        TimeSeries({"a": [1, 2], "b": [1]})


def test_grid_and_particle_solvers_agree_on_mollified_pair():
    s0 = PeakonState([-8.0, -3.0], [1.5, 0.7])
    g = make_grid(40, 4096)
    tp = evolve_multipeakon(s0, BFamilyParams(3.0), 5.0, 0.01, output_every=1.0)
    dists = []
    for n in (4, 8):
        tg = evolve_grid(mollify(state_to_grid(s0, g), n), BFamilyParams(3.0), 5.0, 0.005,
                         output_every=1.0)
        dists.append(max(np.sqrt(np.sum((a.values - state_to_grid(b, g).values) ** 2) * g.dx)
                         for a, b in zip(tg.states, tp.states)))
    # kernel width is 1/n
    assert dists[0] <= 0.5 / 4 and dists[1] <= 0.5 / 8 and dists[1] < dists[0]


def test_grid_solver_time_order():
    g = make_grid(100, 1024)
    u0 = helmholtz_inv(sample(lambda x: 0.6 * np.exp(-x**2 / 8), g), 1.0)
    p = BFamilyParams(3.0)
    ref = evolve_grid(u0, p, 2.0, 0.0025, output_every=2.0).states[-1].values
    errs = [np.max(np.abs(evolve_grid(u0, p, 2.0, dt, output_every=2.0).states[-1].values - ref))
            for dt in (0.04, 0.02)]
    assert np.log2(errs[0] / errs[1]) >= 3.5
