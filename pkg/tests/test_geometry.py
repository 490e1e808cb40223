import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conformal_lab.geometry import (ConformalExponent, ConformallyFlatBall, Field, PositivityError,
                                    ProductSL, RoundSphere, conformal_scalar_curvature,
                                    laplace_beltrami, mean_scalar_curvature,
                                    mean_scalar_curvature_direct, require_positive, sphere_area,
                                    sphere_volume, volume, yamabe_constant_estimate, yamabe_energy,
                                    yamabe_sphere)


def vol_sphere(n):
    return 2 * math.pi ** ((n + 1) / 2) / math.gamma((n + 1) / 2)


@pytest.mark.parametrize("n", [3, 4, 5, 7])
def test_constants(n):
    assert sphere_volume(n) == pytest.approx(vol_sphere(n), rel=1e-14)
    assert sphere_area(n) == pytest.approx(vol_sphere(n - 1), rel=1e-14)
    assert yamabe_sphere(n) == pytest.approx(n * (n - 1) * vol_sphere(n) ** (2 / n), rel=1e-14)


@pytest.mark.parametrize("n", [3, 4, 6])
def test_weights_reproduce_volumes(n):
    assert RoundSphere(n, 300).total_volume() == pytest.approx(vol_sphere(n), rel=1e-10)
    assert ProductSL(n, 2.7, 64).total_volume() == pytest.approx(2.7 * vol_sphere(n - 1), rel=1e-10)
    ball = ConformallyFlatBall(n, None, 1.5, 200)
    assert ball.total_volume() == pytest.approx(vol_sphere(n - 1) * 1.5 ** n / n, rel=1e-10)


def test_stereographic_ball_volume():
    # the unit ball in the stereographic chart is a hemisphere
    ball = ConformallyFlatBall(4, ConformalExponent.stereographic(), 1.0, 400)
    assert ball.total_volume() == pytest.approx(0.5 * vol_sphere(4), rel=1e-10)
    assert np.allclose(ball.scalar_curvature, 12.0, rtol=1e-12)


def test_weights_positive_and_product_cyclic():
    for m in (RoundSphere(3, 50), ProductSL(4, 3.0, 40), ConformallyFlatBall(3, None, 1.0, 40)):
        assert np.all(m.weights > 0)
    m = ProductSL(4, 3.0, 40)
    u = np.cos(2 * np.pi * m.nodes / m.L)
    assert np.allclose(laplace_beltrami(m, np.roll(u, 7)), np.roll(laplace_beltrami(m, u), 7))


def test_coarse_grid_rejected():
    with pytest.raises(ValueError, match="too coarse"):
        RoundSphere(3, 4)


def test_constant_has_zero_laplacian():
    for m in (RoundSphere(5, 64), ProductSL(4, 3.0, 32), ConformallyFlatBall(3, None, 1.0, 32)):
        assert np.abs(laplace_beltrami(m, np.full(m.grid_size, 2.5))).max() < 1e-9


def _order(errs):
    return [errs[k] / errs[k + 1] for k in range(len(errs) - 1)]


def test_sphere_laplacian_eigenfunction_order():
    errs = []
    for N in (50, 100, 200, 400):
        m = RoundSphere(3, N)
        u = np.cos(m.nodes)
        errs.append(np.abs(laplace_beltrami(m, u) + 3 * u).max())
    for r in _order(errs):
        assert r == pytest.approx(4, abs=0.5)


def test_product_laplacian_fourier_order():
    L = 3.0
    errs = []
    for N in (32, 64, 128, 256):
        m = ProductSL(4, L, N)
        u = np.sin(2 * np.pi * m.nodes / L)
        errs.append(np.abs(laplace_beltrami(m, u) + (2 * np.pi / L) ** 2 * u).max())
    for r in _order(errs):
        assert r == pytest.approx(4, abs=0.5)


def test_ball_laplacian_order():
    errs = []
    for N in (40, 80, 160, 320):
        m = ConformallyFlatBall(3, None, 1.0, N)
        r = m.nodes
        u = np.cos(r)
        exact = -np.cos(r) - 2 * np.sin(r) / r
        errs.append(np.abs(laplace_beltrami(m, u) - exact).max())
    for q in _order(errs):
        assert q == pytest.approx(4, abs=0.5)


def test_conformal_scalar_curvature_constants():
    m = RoundSphere(4, 64)
    assert np.allclose(conformal_scalar_curvature(m, np.ones(64)), 12.0)
    a = 1.7
    assert np.allclose(conformal_scalar_curvature(m, np.full(64, a)), 12.0 * a ** (-2.0))


def test_bubble_has_constant_curvature_on_flat_ball():
    errs = []
    n = 3
    for N in (100, 200, 400):
        m = ConformallyFlatBall(n, None, 1.0, N)
        u = (1.0 / (1.0 + m.nodes ** 2)) ** ((n - 2) / 2)
        R = conformal_scalar_curvature(m, u)
        errs.append(np.abs(R - 4 * n * (n - 1)).max())
    assert errs[-1] < 1e-3
    for r in _order(errs):
        assert r == pytest.approx(4, abs=0.5)


def test_positivity_error_locates_violation():
    m = RoundSphere(3, 16)
    u = np.ones(16)
    u[5] = -0.1
    with pytest.raises(PositivityError) as info:
        conformal_scalar_curvature(m, u)
    assert "5" in str(info.value)
    with pytest.raises(PositivityError):
        require_positive(m, np.zeros(16))


def test_field_length_checked():
    with pytest.raises(ValueError):
        Field(RoundSphere(3, 16), np.ones(15))


@pytest.mark.parametrize("n", [3, 4, 5])
def test_energy_of_round_sphere(n):
    m = RoundSphere(n, 200)
    assert yamabe_energy(m, np.ones(200)) == pytest.approx(yamabe_sphere(n), rel=1e-10)


@given(st.floats(1e-3, 1e3))
@settings(max_examples=30, deadline=None)
def test_energy_scale_invariant(a):
    m = RoundSphere(4, 80)
    u = 1 + 0.4 * np.cos(m.nodes) + 0.1 * np.cos(3 * m.nodes)
    assert yamabe_energy(m, a * u) == pytest.approx(yamabe_energy(m, u), rel=1e-12)


def test_energy_of_bubble_on_large_ball():
    n = 4
    m = ConformallyFlatBall(n, None, 200.0, 20000)
    u = 1.0 / (1.0 + m.nodes ** 2)
    assert yamabe_energy(m, u) == pytest.approx(yamabe_sphere(n), rel=2e-3)


def test_mean_curvature_and_volume():
    n = 3
    m = RoundSphere(n, 100)
    assert volume(m, np.ones(100)) == pytest.approx(vol_sphere(n), rel=1e-10)
    assert mean_scalar_curvature(m, np.ones(100)) == pytest.approx(6.0, rel=1e-12)
    a = 0.6
    assert mean_scalar_curvature(m, np.full(100, a)) == pytest.approx(6.0 * a ** -4, rel=1e-12)


def test_product_constant_solution_curvature():
    n = 4
    u0 = ((n - 2) / (4 * n)) ** ((n - 2) / 4)
    assert u0 == pytest.approx(math.sqrt(1 / 8), rel=1e-15)
    m = ProductSL(n, 3.0, 64)
    u = np.full(64, u0)
    # R of the rescaled metric equals c = 4n(n-1) u0^{4/(n-2)} ... i.e. (n-1)(n-2) u0^{-4/(n-2)}
    R = conformal_scalar_curvature(m, u)
    assert np.allclose(R, (n - 1) * (n - 2) / u0 ** (4 / (n - 2)))
    assert 4 * n * (n - 1) * u0 ** (4 / (n - 2)) == pytest.approx((n - 1) * (n - 2))


@given(st.integers(0, 1000))
@settings(max_examples=20, deadline=None)
def test_two_routes_to_mean_curvature_agree(seed):
    rng = np.random.default_rng(seed)
    for m in (RoundSphere(3, 120), ProductSL(4, 4.0, 120)):
        x = m.nodes
        scale = np.pi if m.kind == "sphere" else m.L / (2 * np.pi)
        u = 1 + 0.3 * rng.uniform(-1, 1) * np.cos(x / scale) + 0.1 * rng.uniform(-1, 1) * np.cos(2 * x / scale)
        a, b = mean_scalar_curvature(m, u), mean_scalar_curvature_direct(m, u)
        assert a == pytest.approx(b, rel=1e-10)


def test_yamabe_constant_estimate_sphere():
    m = RoundSphere(3, 200)
    est = yamabe_constant_estimate(m, seeds=[1 + 0.3 * np.cos(m.nodes)])
    assert est == pytest.approx(yamabe_sphere(3), rel=1e-4)
    assert est <= yamabe_energy(m, 1 + 0.3 * np.cos(m.nodes))


def test_yamabe_constant_estimate_product_below_bifurcation():
    n = 4
    L = 0.8 * 2 * np.pi / np.sqrt(2)
    m = ProductSL(n, L, 64)
    est = yamabe_constant_estimate(m)
    e1 = yamabe_energy(m, np.ones(64))
    assert est <= e1 + 1e-12
    assert est == pytest.approx(e1, rel=1e-8)
