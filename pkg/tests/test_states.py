import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from peakon_lab.diagnostics import w11_norm
from peakon_lab.domain import GridFn, deriv, integrate, make_grid, sample
from peakon_lab.functionals import mass_M
from peakon_lab.states import (
    MomentumMeasure,
    PeakonState,
    YplusSampleSpec,
    discretize_measure,
    gaussian_bump,
    measure_to_field,
    merge_states,
    mollify,
    particle_fields,
    peakon_field,
    quadrature_rule,
    sample_Yplus,
    single_peakon,
    state_to_grid,
)

ordered_states = st.integers(1, 8).flatmap(
    lambda n: st.tuples(
        st.lists(st.floats(-20, 20), min_size=n, max_size=n, unique=True),
        st.lists(st.floats(0.01, 3.0), min_size=n, max_size=n),
    )
).filter(lambda qp: np.min(np.diff(np.sort(qp[0])), initial=1.0) > 1e-3).map(
    lambda qp: PeakonState(np.sort(qp[0]), qp[1])
)


def test_peakon_field_values():
    assert peakon_field(single_peakon(1.7), [0.0])[0] == pytest.approx(1.7, abs=1e-15)
    assert peakon_field(single_peakon(1.0), [3.0])[0] == pytest.approx(np.exp(-3), abs=1e-15)
    two = PeakonState([-1.0, 1.0], [1.0, 1.0])
    assert peakon_field(two, [0.0])[0] == pytest.approx(2 * np.exp(-1), abs=1e-15)


def test_state_validation():
    with pytest.raises(ValueError):
        PeakonState([1.0, 0.0], [1.0, 1.0])
    with pytest.raises(ValueError):
        PeakonState([0.0, 1.0], [1.0])
    with pytest.raises(ValueError):
        PeakonState([np.nan], [1.0])


def test_reflection_and_mass():
    s = PeakonState([-1.0, 2.0], [0.5, 1.5])
    r = s.reflected()
    assert np.allclose(r.q, [-2.0, 1.0]) and np.allclose(r.p, [-1.5, -0.5])
    assert s.mass == 4.0
    x = np.linspace(-5, 5, 11)
    assert np.allclose(peakon_field(r, x), -peakon_field(s, -x), atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(ordered_states, st.lists(st.floats(-30, 30), min_size=1, max_size=20))
def test_sweep_fields_match_direct_sums(s, pts):
    x = np.asarray(pts)
    f = particle_fields(s, x)
    d = x[:, None] - s.q[None, :]
    e = np.exp(-np.abs(d))
    assert np.allclose(f.u, e @ s.p, atol=1e-12)
    rho = np.exp(-np.abs(d)) / 3 - np.exp(-2 * np.abs(d)) / 6
    assert np.allclose(f.v, rho @ s.p, atol=1e-12)
    assert np.allclose(f.vxx, 4 * f.v - f.u, atol=1e-12)


def test_h_for_single_peakon_matches_closed_form():
    c = 1.3
    x = np.linspace(-6, 6, 25)
    f = particle_fields(single_peakon(c), x)
    a = np.abs(x)
    exact = c * c * (2 / 3 * np.exp(-a) - 1 / 3 * np.exp(-2 * a))
    assert np.allclose(f.h, exact, atol=1e-13)


def test_one_sided_slopes_at_crest():
    f = particle_fields(single_peakon(2.0), [0.0])
    assert f.ux_left[0] == pytest.approx(2.0) and f.ux_right[0] == pytest.approx(-2.0)
    assert f.ux[0] == pytest.approx(0.0, abs=1e-15)


def test_quadrature_integrates_peakon_square():
    s = PeakonState([0.0, 3.0], [1.0, 0.5])
    x, w = quadrature_rule(s)
    # int (sum p_i e^{-|x-q_i|})^2 = sum_ij p_i p_j (1 + d) e^{-d}
    d = np.abs(s.q[:, None] - s.q[None, :])
    exact = float(s.p @ ((1 + d) * np.exp(-d)) @ s.p)
    assert np.sum(w * particle_fields(s, x).u ** 2) == pytest.approx(exact, rel=1e-13)


def test_measure_to_field_single_atom():
    g = make_grid(80, 1024)
    u = measure_to_field(MomentumMeasure([0.0], [2.4]), g)
    assert np.max(np.abs(u.values - 1.2 * np.exp(-np.abs(g.x)))) <= 1e-15


def test_measure_to_field_zero():
    g = make_grid(20, 64)
    u = measure_to_field(MomentumMeasure([], [], GridFn(g, np.zeros(g.N))), g)
    assert np.all(u.values == 0)


def _aligned_grid(L, N):
    # cell edges on multiples of dx
    return make_grid(L, N, center=0.5 * L / N)


def test_measure_to_field_atom_plus_indicator():
    g = _aligned_grid(32, 8192)
    dens = GridFn(g, 0.1 * (np.abs(g.x) < 1))
    u = measure_to_field(MomentumMeasure([0.0], [2.0], dens), g)
    # direct convolution of the indicator with e^{-|x|}/2
    x = g.x
    inner = 0.1 * (1 - 0.5 * (np.exp(-(1 + x)) + np.exp(-(1 - x))))
    outer = 0.1 * 0.5 * np.exp(-np.abs(x)) * (np.e - 1 / np.e)
    conv = np.where(np.abs(x) <= 1, inner, outer)
    exact = np.exp(-np.abs(x)) + conv
    assert np.max(np.abs(u.values - exact)) <= 1e-6


def test_measure_to_field_rejects_foreign_density_grid():
    g = make_grid(20, 64)
    m = MomentumMeasure([], [], GridFn(make_grid(20, 128), np.ones(128)))
    with pytest.raises(ValueError):
        measure_to_field(m, g)


def test_measure_validation():
    with pytest.raises(ValueError):
        MomentumMeasure([0.0], [-1.0])
    g = make_grid(10, 16)
    with pytest.raises(ValueError):
        MomentumMeasure([], [], GridFn(g, -np.ones(16)))


def test_measure_json_round_trip(tmp_path):
    g = make_grid(10, 16)
    m = MomentumMeasure([0.5], [1.0], GridFn(g, np.linspace(0, 1, 16)))
    m.save(tmp_path / "m.json")
    back = MomentumMeasure.load(tmp_path / "m.json")
    assert back.atoms == m.atoms
    assert back.density.grid == g and np.array_equal(back.density.values, m.density.values)


def test_discretize_pure_atoms_is_identity():
    s = discretize_measure(MomentumMeasure([-1.0, 2.0], [0.4, 3.0]), 0.5)
    assert np.array_equal(s.q, [-1.0, 2.0]) and np.array_equal(s.p, [0.2, 1.5])


def test_discretize_uniform_density_two_bins():
    g = _aligned_grid(4, 64)
    dens = GridFn(g, 2.0 * ((g.x > 0) & (g.x < 1)))
    s = discretize_measure(MomentumMeasure([], [], dens), 0.5)
    assert np.allclose(s.q, [0.25, 0.75], atol=1e-14)
    assert np.allclose(s.p, [0.5, 0.5], atol=1e-14)


@settings(max_examples=25, deadline=None)
@given(st.floats(-5, 5), st.floats(0.3, 3), st.floats(0.05, 2), st.floats(0.05, 1.0))
def test_discretize_gaussian_preserves_mass_and_moment(centre, width, amp, spacing):
    g = make_grid(60, 2048)
    dens = sample(lambda x: amp * np.exp(-0.5 * ((x - centre) / width) ** 2), g)
    m = MomentumMeasure([], [], dens)
    s = discretize_measure(m, spacing)
    assert mass_M(s) == pytest.approx(m.total_mass(), rel=1e-12)
    first = float(np.sum(dens.values * g.x) * g.dx)
    assert float(2 * np.sum(s.p * s.q)) == pytest.approx(first, abs=1e-10 * (1 + abs(first)))


def test_discretize_rejects_bad_spacing():
    with pytest.raises(ValueError):
        discretize_measure(MomentumMeasure([0.0], [1.0]), 0.0)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 32), st.integers(0, 10_000))
def test_mollify_keeps_sign_and_integral(n, seed):
    g = make_grid(40, 2048)
    rng = np.random.default_rng(seed)
    u = GridFn(g, rng.uniform(0, 1, g.N) * np.exp(-g.x**2 / 20))
    out = mollify(u, n)
    assert out.values.min() >= -1e-14
    assert integrate(out) == pytest.approx(integrate(u), abs=1e-10)


def test_mollified_peakon_converges_in_w11():
    g = make_grid(40, 8192)
    u = state_to_grid(single_peakon(1.0), g)
    ux = -np.sign(g.x) * np.exp(-np.abs(g.x))
    dists = []
    for n in (4, 8, 16, 32):
        m = mollify(u, n)
        dists.append(float(np.sum(np.abs(m.values - u.values) + np.abs(deriv(m).values - ux)) * g.dx))
    # the smeared corner costs O(1/n)
    assert all(a > 1.8 * b for a, b in zip(dists, dists[1:]))
    assert w11_norm(mollify(u, 32), u) < w11_norm(mollify(u, 4), u)


def test_mollify_rejects_bad_order():
    with pytest.raises(ValueError):
        mollify(GridFn(make_grid(10, 16), np.zeros(16)), 0)


def test_sample_yplus_single_gaussian_is_nonnegative():
    for seed in range(20):
        m = sample_Yplus(YplusSampleSpec(atom_count=(0, 0), bump_count=(1, 1), seed=seed))
        assert m.positions.size == 0
        assert m.density.values.min() >= 0


def test_sample_yplus_is_deterministic():
    a = sample_Yplus(YplusSampleSpec(seed=11))
    b = sample_Yplus(YplusSampleSpec(seed=11))
    assert a.atoms == b.atoms
    assert (a.density is None and b.density is None) or np.array_equal(a.density.values, b.density.values)


def test_sample_spec_validation():
    with pytest.raises(ValueError):
        YplusSampleSpec(atom_mass=(0.0, 1.0))


def test_gaussian_bump_and_merge():
    bump = gaussian_bump(0.02, 3.0, 0.5, 0.1)
    assert bump.mass == pytest.approx(0.02, rel=1e-14)
    assert np.sum(bump.p * bump.q) / np.sum(bump.p) == pytest.approx(3.0, abs=1e-12)
    merged = merge_states(single_peakon(1.0), bump, single_peakon(0.5, 3.0))
    assert merged.mass == pytest.approx(2.0 + 0.02 + 1.0, rel=1e-14)
    assert np.all(np.diff(merged.q) > 0)


def test_grid_sampling_matches_derivative_of_particle_field():
    s = PeakonState([-2.0, 1.0], [0.7, 1.2])
    g = make_grid(60, 4096)
    u = state_to_grid(s, g)
    f = particle_fields(s, g.x)
    smooth = np.min(np.abs(g.x[:, None] - s.q[None, :]), axis=1) > 1.0
    assert np.max(np.abs(deriv(mollify(u, 64)).values - f.ux)[smooth]) <= 1e-2
