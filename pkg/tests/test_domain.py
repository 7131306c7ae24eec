import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from peakon_lab.domain import (
    GridFn,
    deriv,
    green_kernel,
    helmholtz,
    helmholtz_inv,
    integrate,
    make_grid,
    periodic_distance,
    resolvent_identity_residual,
    sample,
    spectral_interp,
)


def test_grid_spacing_and_left_node():
    assert make_grid(200, 2048).dx == 0.09765625
    assert make_grid(1, 16).x[0] == -0.5


@pytest.mark.parametrize("N", [1000, 8, 0, 17])
def test_grid_rejects_bad_sizes(N):
    with pytest.raises(ValueError):
        make_grid(200, N)


def test_grid_rejects_nonpositive_length():
    with pytest.raises(ValueError):
        make_grid(-1.0, 64)


def test_deriv_of_fundamental_mode():
    g = make_grid(200, 2048)
    w = 2 * np.pi / g.L
    d = deriv(sample(lambda x: np.sin(w * x), g))
    assert np.max(np.abs(d.values - w * np.cos(w * g.x))) <= 1e-10


def test_deriv_of_constant_vanishes():
    g = make_grid(50, 256)
    assert np.max(np.abs(deriv(GridFn(g, np.full(g.N, 3.0))).values)) <= 1e-13


def test_deriv_of_gaussian():
    g = make_grid(200, 2048)
    d = deriv(sample(lambda x: np.exp(-x**2), g))
    assert np.max(np.abs(d.values + 2 * g.x * np.exp(-g.x**2))) <= 1e-8


def test_second_derivative_of_gaussian():
    g = make_grid(200, 2048)
    d2 = deriv(sample(lambda x: np.exp(-x**2), g), 2)
    exact = (4 * g.x**2 - 2) * np.exp(-g.x**2)
    assert np.max(np.abs(d2.values - exact)) <= 1e-8


def test_helmholtz_inv_of_zero_and_constant():
    g = make_grid(40, 128)
    assert np.all(helmholtz_inv(GridFn(g, np.zeros(g.N)), 1.0).values == 0)
    out = helmholtz_inv(GridFn(g, np.full(g.N, 3.0)), 2.0)
    assert np.allclose(out.values, 0.75, rtol=0, atol=1e-14)


def test_helmholtz_inv_of_delta_is_periodic_green():
    g = make_grid(40, 4096)
    delta = np.zeros(g.N)
    delta[g.N // 2] = 2.0 / g.dx
    u = helmholtz_inv(GridFn(g, delta), 1.0)
    r = np.abs(g.x)
    exact = np.cosh(g.L / 2 - r) / np.sinh(g.L / 2)
    assert np.max(np.abs(u.values - exact)) <= 2 * g.dx
    back = helmholtz(u, 1.0).values
    assert np.max(np.abs(back - delta)) <= 1e-8 * np.max(delta)


def test_green_kernel_values_at_source():
    g = make_grid(200, 2048)
    assert abs(green_kernel(1.0, g).values[g.N // 2] - 0.5) <= 1e-10
    assert abs(green_kernel(2.0, g).values[g.N // 2] - 0.25) <= 1e-10


@pytest.mark.parametrize("a", [1.0, 2.0])
def test_green_kernel_against_symbol_sum(a):
    g = make_grid(30, 1024)
    m = np.arange(-2**22, 2**22)
    symbol_sum = np.sum(1.0 / (a * a + (2 * np.pi * m / g.L) ** 2)) / g.L
    assert abs(green_kernel(a, g).values[g.N // 2] - symbol_sum) <= 1e-5


def test_green_kernel_rejects_nonpositive_a():
    with pytest.raises(ValueError):
        green_kernel(0.0, make_grid(10, 16))


def test_resolvent_identity_zero():
    g = make_grid(10, 64)
    assert resolvent_identity_residual(GridFn(g, np.zeros(g.N))) == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_resolvent_identity_random_bandlimited(seed):
    rng = np.random.default_rng(seed)
    g = make_grid(100, 512)
    coef = np.zeros(g.N // 2 + 1, complex)
    coef[1:100] = rng.normal(size=99) + 1j * rng.normal(size=99)
    f = GridFn(g, np.fft.irfft(coef, n=g.N) * 10)
    assert resolvent_identity_residual(f) <= 1e-10


@settings(max_examples=30, deadline=None)
@given(st.floats(0.5, 3.0), st.floats(-5, 5), st.floats(0.5, 4))
def test_helmholtz_round_trip(a, centre, width):
    g = make_grid(80, 1024)
    f = sample(lambda x: np.exp(-((x - centre) / width) ** 2), g)
    back = helmholtz(helmholtz_inv(f, a), a)
    assert np.max(np.abs(back.values - f.values)) <= 1e-10


def test_integrate_gaussian():
    g = make_grid(40, 512)
    assert abs(integrate(sample(lambda x: np.exp(-x**2), g)) - np.sqrt(np.pi)) <= 1e-12


def test_periodic_distance_range():
    d = periodic_distance(np.array([-7.0, 0.0, 3.0, 9.0]), 10.0)
    assert np.allclose(d, [3.0, 0.0, 3.0, 1.0])


@settings(max_examples=20, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=8))
def test_spectral_interp_reproduces_trig_polynomial(points):
    g = make_grid(20, 64)
    w = 2 * np.pi / g.L
    fn = lambda x: np.cos(3 * w * x) + 0.5 * np.sin(5 * w * x)  # noqa: E731
    out = spectral_interp(fn(g.x), g, points)
    assert np.max(np.abs(out - fn(np.asarray(points)))) <= 1e-12


def test_gridfn_rejects_wrong_length():
    with pytest.raises(ValueError):
        GridFn(make_grid(10, 16), np.zeros(15))
