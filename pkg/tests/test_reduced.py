import functools
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

from conformal_lab.reduced import (F0_closed_form, F0_quadrature, F_general, RadialGrid,
                                   ReducedEnergyContext, angular_moments, critical_dimension_scan,
                                   critical_epsilon, harmonic_decomposition, pair_average,
                                   radial_integral_In, solve_radial_sector, source_weight,
                                   sphere_average, sphere_moment, z_solve)
from conformal_lab.weyl import AlgebraicWeyl, random_weyl


@functools.cache
def _ctx52():
    return ReducedEnergyContext(52, random_weyl(52, seed=7))


def _zero_weyl(n):
    return AlgebraicWeyl(np.zeros((n,) * 4))


# sphere moments

def test_moment_examples():
    n = 7
    assert sphere_moment([2], n) == Fraction(1, n)
    assert sphere_moment([2, 2], n) == Fraction(1, n * (n + 2))
    assert sphere_moment([4], n) == Fraction(3, n * (n + 2))
    assert sphere_moment([3, 1], n) == 0
    assert sphere_moment([1], n) == 0
    with pytest.raises(ValueError):
        sphere_moment([10], n)


def test_moments_against_monte_carlo():
    n = 4
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1_000_000, n))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    for exps in ([2], [2, 2], [4], [2, 2, 2], [4, 2], [6]):
        m = np.prod([x[:, i] ** a for i, a in enumerate(exps)], axis=0)
        mc, se = m.mean(), m.std() / np.sqrt(m.size)
        assert abs(mc - float(sphere_moment(exps, n))) < 3 * se + 1e-12


def test_sphere_average_of_identity_contractions():
    n = 5
    I = np.eye(n)
    # <|x|^2> = 1 and <|x|^4> = 1
    assert sphere_average("ab->", I, slots="ab", n=n) == pytest.approx(1.0)
    assert sphere_average("ab,cd->", I, I, slots="abcd", n=n) == pytest.approx(1.0)
    assert sphere_average("a->", np.ones(n), slots="a", n=n) == 0.0


def _poly(T, y):
    out = T
    for _ in range(T.ndim):
        out = out @ y
    return out


@pytest.mark.parametrize("d", [2, 3, 4, 5])
def test_harmonic_decomposition_reconstructs_and_is_tracefree(d):
    n = 6
    rng = np.random.default_rng(d)
    P = rng.standard_normal((n,) * d)
    # symmetrise
    from itertools import permutations
    P = sum(np.transpose(P, p) for p in permutations(range(d))) / math.factorial(d)
    parts = harmonic_decomposition(P, n)
    for _, h in parts:
        if h.ndim >= 2:
            assert np.abs(np.trace(h, axis1=-2, axis2=-1)).max() < 1e-12
    for y in rng.standard_normal((5, n)):
        recon = sum((y @ y) ** k * _poly(h, y) for k, h in parts)
        assert recon == pytest.approx(_poly(P, y), rel=1e-12, abs=1e-12)


def test_pair_average_matches_monte_carlo():
    n = 4
    rng = np.random.default_rng(1)
    A = rng.standard_normal((n, n))
    A = A + A.T
    B = rng.standard_normal((n, n))
    B = B + B.T
    x = rng.standard_normal((400_000, n))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    vals = np.einsum("pi,ij,pj->p", x, A, x) * np.einsum("pi,ij,pj->p", x, B, x)
    mc, se = vals.mean(), vals.std() / np.sqrt(vals.size)
    assert abs(pair_average(A, B, 2, 2, n) - mc) < 3 * se


# closed form

def test_radial_integral_n12():
    assert radial_integral_In(12) == pytest.approx(1 / 144, rel=1e-14)
    for n in (12, 20, 52):
        q = quad(lambda r: (1 + r * r) ** (2 - n) * r ** (n + 3), 0, np.inf, epsabs=0, epsrel=1e-12)[0]
        assert radial_integral_In(n) == pytest.approx(q, rel=1e-10)


def test_context_validation():
    with pytest.raises(ValueError, match="n = 10 singular denominator"):
        ReducedEnergyContext(10, _zero_weyl(10))
    with pytest.raises(ValueError, match="n >= 11"):
        ReducedEnergyContext(9, _zero_weyl(9))
    with pytest.raises(ValueError):
        ReducedEnergyContext(12, random_weyl(12, seed=0), harmonic_degree_max=4)


def test_zero_weyl_gives_zero():
    ctx = ReducedEnergyContext(12, _zero_weyl(12))
    assert F0_closed_form(ctx, 0.7) == 0.0
    t = F0_quadrature(ctx, 0.7)
    assert t.total == t.term1 == t.term2 == t.term3 == 0.0


@given(st.floats(1e-3, 1e-2))
@settings(max_examples=10, deadline=None)
def test_small_eps_quartic(eps):
    ctx = _ctx52()
    assert F0_closed_form(ctx, eps / 2) / F0_closed_form(ctx, eps) == pytest.approx(1 / 16, rel=1e-3)


@pytest.mark.parametrize("n", [52, 60])
def test_quadrature_matches_closed_form(n):
    ctx = ReducedEnergyContext(n, random_weyl(n, seed=7))
    mo = angular_moments(ctx.W)
    for eps in (0.3, 0.7, 1.0):
        t = F0_quadrature(ctx, eps, moments=mo)
        ref = F0_closed_form(ctx, eps)
        assert t.total == pytest.approx(ref, rel=1e-6)
        assert abs(t.term1) <= 1e-10 * abs(t.term2)
        assert abs(t.term3) <= 1e-10 * abs(t.term2)


def test_source_vanishes_at_origin():
    ctx = ReducedEnergyContext(12, random_weyl(12, seed=2))
    z = z_solve(ctx, np.zeros(12), 0.7)
    assert z.source_max <= 1e-13
    assert z.max_abs() <= 1e-12


# critical scale

def test_critical_epsilon_n52_exact():
    c = critical_epsilon(52)
    assert c.discriminant == Fraction(1, 49)
    assert c.s_roots == [Fraction(1, 2), Fraction(11, 20)]
    assert c.eps == pytest.approx([math.sqrt(0.5), math.sqrt(0.55)], rel=1e-14)
    assert sorted(c.second_derivative_signs) == [-1, 1]


def test_critical_epsilon_roots_are_stationary():
    ctx = _ctx52()
    h = 1e-5
    for e in critical_epsilon(52).eps:
        d = (F0_closed_form(ctx, e + h) - F0_closed_form(ctx, e - h)) / (2 * h)
        assert abs(d) < 1e-7 * abs(F0_closed_form(ctx, e))


def test_critical_epsilon_n51_empty():
    c = critical_epsilon(51)
    assert not c.exists
    assert c.discriminant < 0


def test_large_n_limit():
    # both roots real with ab -> 1
    c = critical_epsilon(10_000)
    assert c.exists and len(c.s_roots) == 2
    assert float(c.s_roots[0]) == pytest.approx(0.5, rel=1e-2)
    assert float(c.s_roots[1]) == pytest.approx(1.0, rel=1e-2)


def test_critical_dimension_scan():
    assert critical_dimension_scan(range(11, 81)) == 52
    assert critical_dimension_scan(range(53, 81)) == 53
    assert critical_dimension_scan(range(11, 51)) is None


@given(st.integers(11, 200))
def test_existence_iff_discriminant_polynomial(n):
    assert critical_epsilon(n).exists == (n * n - 54 * n + 152 >= 0 and n >= 52)


# z solver

def test_constraints_hold_off_centre():
    n = 12
    ctx = ReducedEnergyContext(n, random_weyl(n, seed=3))
    z = z_solve(ctx, np.r_[0.2, np.zeros(n - 1)], 0.7)
    res = z.constraint_residuals()
    assert res
    assert max(abs(r[3]) for r in res) <= 1e-10


@pytest.mark.parametrize("j", [0, 1, 2])
def test_sector_solver_second_order(j):
    n, eps = 12, 0.7
    sols = []
    for size in (400, 800, 1600):
        grid = RadialGrid.build(eps, 70.0, size)
        f = source_weight(n, eps, grid.rho) * grid.rho ** 2 * (1 - grid.rho ** 2)
        z, _ = solve_radial_sector(n, eps, j, grid, f)
        sols.append(z)
    e1 = np.abs(sols[0] - sols[1][::2]).max()
    e2 = np.abs(sols[1][::2] - sols[2][::4]).max()
    assert e1 / e2 == pytest.approx(4, abs=0.5)


def test_general_matches_closed_form_at_origin():
    n = 12
    ctx = ReducedEnergyContext(n, random_weyl(n, seed=3))
    assert F_general(ctx, np.zeros(n), 0.7).total == pytest.approx(F0_closed_form(ctx, 0.7), rel=1e-6)


def test_general_even_in_xi():
    n = 12
    ctx = ReducedEnergyContext(n, random_weyl(n, seed=3))
    rng = np.random.default_rng(4)
    for _ in range(3):
        d = rng.standard_normal(n)
        xi = 0.3 * d / np.linalg.norm(d)
        fp = F_general(ctx, xi, 0.7).total
        fm = F_general(ctx, -xi, 0.7).total
        assert abs(fp - fm) <= 1e-8 * abs(fp)


def test_general_rejects_huge_dimension():
    ctx = _ctx52()
    with pytest.raises(ValueError, match="dense tensors"):
        F_general(ctx, np.r_[0.1, np.zeros(51)], 0.7)
