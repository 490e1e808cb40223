import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conformal_lab.geometry import ConformalExponent, ConformallyFlatBall
from conformal_lab.pohozaev import (CASES, LHS_IDS, RHS_IDS, BubbleProfile, PohozaevProblem,
                                    PolynomialVectorField, RadialProfile, ball_residual,
                                    deformation_tensor, pohozaev_terms, radial_ode_profile,
                                    refinement_study, sphere_cubature, standard_case,
                                    stereographic_constant)
from conformal_lab.reduced import sphere_moment

FLAT = ConformalExponent.flat()
STEREO = ConformalExponent.stereographic()


# cubature and vector fields

@pytest.mark.parametrize("n", [3, 4, 6])
def test_cubature_exact_on_moments(n):
    pts, w = sphere_cubature(n, 8)
    area = w.sum()
    for exps in ([2], [4], [2, 2], [6], [4, 2], [2, 2, 2], [8], [4, 4], [2, 2, 2, 2][:n]):
        vals = np.prod([pts[:, i] ** a for i, a in enumerate(exps)], axis=0)
        assert np.sum(w * vals) / area == pytest.approx(float(sphere_moment(exps, n)), rel=1e-12, abs=1e-14)
    assert np.abs(w @ pts[:, 0] ** 3).max() < 1e-13
    assert np.allclose(np.linalg.norm(pts, axis=1), 1.0)


def test_jacobian_matches_differences():
    V = PolynomialVectorField.random(4, seed=2)
    x = np.array([0.1, -0.3, 0.2, 0.5])
    h = 1e-6
    J = np.column_stack([(V.value(x + h * e) - V.value(x - h * e)) / (2 * h) for e in np.eye(4)])
    assert np.allclose(J, V.jacobian(x), atol=1e-8)


def test_deformation_example():
    n = 3
    C = np.zeros((n, n, n))
    C[0, 0, 0] = 1.0
    V = PolynomialVectorField(np.zeros(n), np.zeros((n, n)), C)
    T = deformation_tensor(V, FLAT, np.array([0.5, 0.0, 0.0]))
    assert np.allclose(T, np.diag([4 / 3, -2 / 3, -2 / 3]))


def _special_conformal(a):
    n = len(a)
    C = np.zeros((n, n, n))
    I = np.eye(n)
    # V = 2 (a.x) x - |x|^2 a
    for i in range(n):
        C[i] = np.outer(a, I[i]) + np.outer(I[i], a) - a[i] * I
    return PolynomialVectorField(np.zeros(n), np.zeros((n, n)), C)


@given(st.integers(0, 1000))
@settings(max_examples=20, deadline=None)
def test_conformal_killing_fields_have_zero_deformation(seed):
    n = 4
    rng = np.random.default_rng(seed)
    x = rng.uniform(-0.5, 0.5, (7, n))
    K = rng.standard_normal((n, n))
    rot = PolynomialVectorField(np.zeros(n), K - K.T, np.zeros((n, n, n)))
    for V in (rot, PolynomialVectorField.dilation(n), _special_conformal(rng.standard_normal(n)),
              PolynomialVectorField.constant(rng.standard_normal(n))):
        assert np.abs(deformation_tensor(V, FLAT, x)).max() < 1e-12


@given(st.integers(0, 1000))
@settings(max_examples=20, deadline=None)
def test_deformation_symmetric_and_tracefree(seed):
    n = 5
    V = PolynomialVectorField.random(n, seed)
    x = np.random.default_rng(seed).uniform(-0.5, 0.5, (6, n))
    T = deformation_tensor(V, STEREO, x)
    assert np.allclose(T, np.swapaxes(T, -1, -2))
    assert np.abs(np.trace(T, axis1=-2, axis2=-1)).max() < 1e-12


# profiles

def test_profiles_solve_their_equations():
    rng = np.random.default_rng(0)
    for n in (3, 5):
        x = rng.uniform(-0.55, 0.55, (200, n))
        xi = 0.3 * np.ones(n) / np.sqrt(n)
        assert np.abs(ball_residual(n, FLAT, BubbleProfile(n, xi, 0.8), x)).max() < 1e-10
        u = RadialProfile.constant(stereographic_constant(n))
        assert np.abs(ball_residual(n, STEREO, u, x)).max() < 1e-10
    u = radial_ode_profile(4, delta=0.5)
    x = rng.uniform(-0.55, 0.55, (200, 4))
    assert np.abs(ball_residual(4, FLAT, u, x, delta=0.5)).max() < 1e-9


def test_stereographic_constant():
    assert stereographic_constant(3) == pytest.approx(0.25 ** 0.25)
    assert stereographic_constant(4) ** 2 == pytest.approx(0.25)
    assert stereographic_constant(4, 0.3) ** (2 - 0.3) == pytest.approx(0.25)


def test_bubble_profile_gradient_and_laplacian():
    n = 4
    u = BubbleProfile(n, np.array([0.1, 0.0, -0.2, 0.05]), 0.7)
    x = np.array([0.3, -0.1, 0.2, 0.0])
    h = 1e-4
    E = np.eye(n)
    g = np.array([(u.value(x + h * e) - u.value(x - h * e)) / (2 * h) for e in E])
    lap = sum((u.value(x + h * e) - 2 * u.value(x) + u.value(x - h * e)) / h ** 2 for e in E)
    assert np.allclose(g, u.gradient(x), rtol=1e-7)
    assert lap == pytest.approx(float(u.laplacian(x)), rel=1e-5)


# identity

def test_term_ids_and_rows():
    rep = pohozaev_terms(standard_case("classical", grid_size=16))
    assert tuple(rep.lhs_terms) == LHS_IDS
    assert tuple(rep.rhs_terms) == RHS_IDS
    rows = rep.rows()
    assert rows[-1][0] == "residual" and len(rows) == len(LHS_IDS) + len(RHS_IDS) + 1
    assert rep.residual == pytest.approx(abs(rep.lhs - rep.rhs))


def test_delta_term_off_at_zero():
    rep = pohozaev_terms(standard_case("classical", grid_size=16))
    assert rep.rhs_terms["delta_power"] == 0.0


def test_linear_in_vector_field():
    p = standard_case("classical", n=3, grid_size=24)
    V1 = PolynomialVectorField.random(3, 1)
    V2 = PolynomialVectorField.random(3, 2)
    t1 = pohozaev_terms(p.with_field(V1))
    t2 = pohozaev_terms(p.with_field(V2))
    t12 = pohozaev_terms(p.with_field(V1 + V2.scale(-2.5)))
    for k in LHS_IDS:
        assert t12.lhs_terms[k] == pytest.approx(t1.lhs_terms[k] - 2.5 * t2.lhs_terms[k], abs=1e-12)
    for k in RHS_IDS:
        assert t12.rhs_terms[k] == pytest.approx(t1.rhs_terms[k] - 2.5 * t2.rhs_terms[k], abs=1e-12)


def test_zero_field_gives_zero_terms():
    p = standard_case("classical", grid_size=16).with_field(PolynomialVectorField.zero(3))
    rep = pohozaev_terms(p)
    assert rep.scale == 0.0 and rep.residual == 0.0


@pytest.mark.parametrize("name", ["dilation", "translation"])
@pytest.mark.parametrize("n", [3, 4])
def test_symmetric_cases_exact(name, n):
    st_ = refinement_study(standard_case(name, n=n), levels=3, base_grid=16)
    assert st_.exact_zero and st_.passed
    assert max(st_.residuals) <= 1e-8


@pytest.mark.parametrize("n", [3, 4, 5])
def test_classical_second_order(n):
    st_ = refinement_study(standard_case("classical", n=n), levels=3, base_grid=16)
    assert not st_.exact_zero
    assert st_.observed_order == pytest.approx(2.0, abs=0.2)
    assert st_.passed


def test_stereographic_second_order():
    st_ = refinement_study(standard_case("stereographic", n=3), levels=3, base_grid=32)
    assert all(o == pytest.approx(2.0, abs=0.2) for o in st_.orders)
    assert [r for _, r, _ in st_.rows()] == st_.residuals


def test_non_solution_warns_and_fails():
    p = standard_case("non-solution", n=3)
    rep = pohozaev_terms(p.with_grid(16))
    assert rep.warning is not None and rep.solution_residual > 1e-8
    st_ = refinement_study(p, levels=3, base_grid=16)
    assert not st_.passed
    assert st_.observed_order < 0.5


@pytest.mark.parametrize("delta", [0.1, 0.5])
def test_subcritical_identity_converges(delta):
    n = 4
    ball = ConformallyFlatBall(n, FLAT, 1.0, 16)
    p = PohozaevProblem(ball, radial_ode_profile(n, delta), PolynomialVectorField.random(n, 3), delta)
    assert pohozaev_terms(p).rhs_terms["delta_power"] != 0.0
    st_ = refinement_study(p, levels=3, base_grid=16)
    assert st_.observed_order == pytest.approx(2.0, abs=0.2)


def test_validation():
    ball = ConformallyFlatBall(3, FLAT, 1.0, 16)
    u = BubbleProfile(3)
    with pytest.raises(ValueError, match="3 <= n <= 7"):
        PohozaevProblem(ConformallyFlatBall(8, FLAT, 1.0, 16), BubbleProfile(8), PolynomialVectorField.zero(8))
    with pytest.raises(ValueError, match="dimension"):
        PohozaevProblem(ball, u, PolynomialVectorField.zero(4))
    with pytest.raises(ValueError, match="violates"):
        PohozaevProblem(ball, u, PolynomialVectorField.zero(3), delta=4.0)
    with pytest.raises(ValueError, match="positive"):
        PohozaevProblem(ball, u.scaled(-1.0), PolynomialVectorField.zero(3))
    with pytest.raises(ValueError, match="at least 3"):
        refinement_study(standard_case("classical"), levels=2)
    with pytest.raises(ValueError, match="unknown case"):
        standard_case("bogus")
    assert set(CASES) == {"classical", "dilation", "translation", "stereographic", "non-solution"}
