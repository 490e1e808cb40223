"""End-to-end acceptance criteria, one test per criterion at its stated tolerance."""

import math
import subprocess
import sys
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from conformal_lab.bubbles import (BubbleParams, bubble_energy_flat, bubble_residual,
                                   bubble_stencil_residual, energy_quantization_check,
                                   extract_bubbles, plant_bubbles)
from conformal_lab.continuation import (SteadyProblem, continue_branch, enumerate_solutions,
                                        morse_inequality_check, newton_solve, shooting_enumeration)
from conformal_lab.flow import FlowConfig, energy_identity_check, run, star_normalization
from conformal_lab.geometry import (ConformallyFlatBall, Field, ProductSL, RoundSphere,
                                    laplace_beltrami, yamabe_energy, yamabe_sphere)
from conformal_lab.pohozaev import refinement_study, standard_case
from conformal_lab.reduced import (F0_closed_form, F0_quadrature, RadialGrid, ReducedEnergyContext,
                                   angular_moments, critical_dimension_scan, critical_epsilon,
                                   solve_radial_sector, source_weight)
from conformal_lab.weyl import PerturbationSpec, origin_jet_check, random_weyl

TESTS = Path(__file__).parent


def _say(msg):
    print(msg)


def test_acceptance_01_closed_form_reproduction():
    worst = 0.0
    for n in (52, 60):
        ctx = ReducedEnergyContext(n, random_weyl(n, seed=7))
        mo = angular_moments(ctx.W)
        for eps in (0.3, 0.7, 1.0):
            t = F0_quadrature(ctx, eps, moments=mo)
            ref = F0_closed_form(ctx, eps)
            rel = abs(t.total - ref) / abs(ref)
            worst = max(worst, rel)
            assert rel <= 1e-6
            assert abs(t.term1) <= 1e-10 * abs(t.term2)
            assert abs(t.term3) <= 1e-10 * abs(t.term2)
    _say(f"closed form vs quadrature: max relative difference {worst:.2e}")


def test_acceptance_02_critical_dimension():
    t0 = time.perf_counter()
    assert critical_dimension_scan(range(11, 81)) == 52
    assert critical_epsilon(52).s_roots == [Fraction(1, 2), Fraction(11, 20)]
    assert time.perf_counter() - t0 < 1.0


def test_acceptance_03_bubble_facts():
    rng = np.random.default_rng(0)
    n = 6
    b = BubbleParams(rng.standard_normal(n), 0.8)
    assert bubble_residual(b, b.xi + 2 * rng.standard_normal((10_000, n))) <= 1e-12
    for dim in (3, 4, 5):
        Y = yamabe_sphere(dim)
        vals = [bubble_energy_flat(dim, BubbleParams(np.r_[x, np.zeros(dim - 1)], e))
                for x in np.linspace(-3, 3, 5) for e in np.geomspace(0.05, 5, 5)]
        assert max(abs(v - Y) / Y for v in vals) <= 1e-6
        assert (max(vals) - min(vals)) / Y <= 1e-8


def test_acceptance_04_pohozaev():
    t0 = time.perf_counter()
    for name in ("dilation", "translation"):
        st = refinement_study(standard_case(name, n=3), levels=3, base_grid=32)
        assert max(st.residuals) <= 1e-8
    st = refinement_study(standard_case("stereographic", n=3), levels=3, base_grid=32)
    assert all(abs(o - 2) <= 0.2 for o in st.orders)
    neg = refinement_study(standard_case("non-solution", n=3), levels=3, base_grid=32)
    assert not neg.passed and neg.reports[-1].warning
    assert time.perf_counter() - t0 < 10
    _say(f"stereographic orders {[round(o, 3) for o in st.orders]}; "
         f"non-solution orders {[round(o, 3) for o in neg.orders]}")


def test_acceptance_05_yamabe_flow():
    m = RoundSphere(3, 800)
    u0 = 1 + 0.3 * np.cos(m.nodes)
    t0 = time.perf_counter()
    devs = []
    for dt in (0.0025, 0.00125):
        tr = run(FlowConfig(m, u0, dt0=dt, dt_max=dt, max_change=dt))
        assert tr.converged and tr.final.sup_residual < 1e-6
        assert np.abs(tr.history["vol"] - 1).max() <= 1e-12
        r = tr.history["r"]
        assert np.all(np.diff(r) <= 1e-12 * abs(r[0]))
        devs.append(energy_identity_check(tr))
    assert devs[0] <= 0.01
    assert 1.6 <= devs[0] / devs[1] <= 2.4
    assert time.perf_counter() - t0 < 120
    _say(f"energy identity deviation {devs[0]:.3e} -> {devs[1]:.3e}")


def test_acceptance_06_product_structure():
    n = 4
    L1 = 2 * math.pi / math.sqrt(2)
    p = SteadyProblem(n, 0.8 * L1, grid_size=256)
    br = continue_branch(newton_solve(p, np.full(256, p.constant_solution())), "L", 1.2 * L1, ds=0.1)
    assert abs(br.bifurcations[0].value - 4.442883) <= 1e-3

    m = ProductSL(n, 0.8 * L1, 256)
    u_c = math.sqrt(1 / 8)
    tr = run(FlowConfig(m, u_c * (1 + 0.2 * np.cos(2 * np.pi * m.nodes / m.L)), t_max=400))
    assert np.abs(star_normalization(tr.final.u, tr.final.r, n) - 0.353553).max() <= 1e-6

    m = ProductSL(n, 1.5 * L1, 256)
    tr = run(FlowConfig(m, u_c * (1 + 0.2 * np.cos(2 * np.pi * m.nodes / m.L)), t_max=400))
    e_const = yamabe_energy(m, np.full(256, u_c))
    assert tr.converged and tr.final.energy < e_const
    assert np.ptp(tr.final.u.values) > 0.1 * tr.final.u.values.mean()

    p = SteadyProblem(n, 1.5 * L1, delta=0.05, grid_size=256)
    seed = p.constant_solution() + 0.3 * np.cos(2 * np.pi * p.manifold().nodes / p.L)
    sweep = continue_branch(newton_solve(p, seed), "delta", 0.0, ds=0.02)
    direct = newton_solve(p.with_params(delta=0.0), seed)
    assert np.abs(sweep.records[-1].u.values - direct.u.values).max() <= 1e-8
    assert {r.morse_index for r in sweep.records} == {direct.morse_index}
    _say(f"L1 detected {br.bifurcations[0].value:.7f}; Delaunay energy {tr.final.energy:.6f} "
         f"< constant {e_const:.6f}; Morse index along delta sweep {direct.morse_index}")


def test_acceptance_07_morse_inequalities():
    L1 = 2 * math.pi / math.sqrt(2)
    p = SteadyProblem(4, 1.5 * L1, delta=0.01, grid_size=256)
    found = enumerate_solutions(p)
    rep = morse_inequality_check(found)
    assert rep.all_pass
    assert len(shooting_enumeration(p)) == len(found)
    _say(f"index tallies {rep.tallies}; rows {rep.rows}")


@pytest.mark.parametrize("scales", [(0.02,), (0.02, 0.03)])
def test_acceptance_08_bubble_decomposition(scales):
    n = 4
    m = RoundSphere(n, 4000)
    poles = [0.0, math.pi][:len(scales)]
    k = len(scales)
    u = plant_bubbles(m, n, k ** (2 / n) * yamabe_sphere(n), poles, scales)
    c = yamabe_energy(m, u)
    dec = extract_bubbles(Field(m, u), c)
    assert dec.m == k
    found = sorted(dec.bubbles, key=lambda b: b.centre[0])
    for fb, e in zip(found, scales):
        assert abs(fb.eps - e) / e <= 0.01
    assert energy_quantization_check(0.0, k, c, n) / c <= 0.01


def test_acceptance_09_blowup_geometry():
    chk = origin_jet_check(PerturbationSpec(mu=1.0, lam=0.0, rho=0.5), random_weyl(4, seed=1), 1e-2)
    assert chk.weyl_vanishes and chk.nabla_weyl_vanishes
    assert chk.norms["nabla2_weyl"] >= 1e3 * chk.tol
    _say(f"jet norms {chk.norms}, tolerance {chk.tol:.3e}")


def _grid_order_panel():
    ratios = {}

    def order(errs):
        return [errs[k] / errs[k + 1] for k in range(len(errs) - 1)]

    errs = []
    for N in (50, 100, 200):
        m = RoundSphere(3, N)
        errs.append(np.abs(laplace_beltrami(m, np.cos(m.nodes)) + 3 * np.cos(m.nodes)).max())
    ratios["sphere Laplacian"] = order(errs)
    errs = []
    for N in (32, 64, 128):
        m = ProductSL(4, 3.0, N)
        u = np.sin(2 * np.pi * m.nodes / 3.0)
        errs.append(np.abs(laplace_beltrami(m, u) + (2 * np.pi / 3.0) ** 2 * u).max())
    ratios["product Laplacian"] = order(errs)
    errs = []
    for N in (40, 80, 160):
        m = ConformallyFlatBall(3, None, 1.0, N)
        r = m.nodes
        errs.append(np.abs(laplace_beltrami(m, np.cos(r)) + np.cos(r) + 2 * np.sin(r) / r).max())
    ratios["ball Laplacian"] = order(errs)
    ratios["bubble stencil"] = order([bubble_stencil_residual(4, 1.0, 2.0, N) for N in (100, 200, 400)])
    st = refinement_study(standard_case("classical", n=3), levels=3, base_grid=16)
    ratios["Pohozaev classical"] = st.ratios
    sols = []
    for size in (400, 800, 1600):
        g = RadialGrid.build(0.7, 70.0, size)
        f = source_weight(12, 0.7, g.rho) * g.rho ** 2 * (1 - g.rho ** 2)
        sols.append(solve_radial_sector(12, 0.7, 2, g, f)[0])
    ratios["z sector solver"] = order([np.abs(sols[0] - sols[1][::2]).max(),
                                       np.abs(sols[1][::2] - sols[2][::4]).max(), 1.0])[:1]
    sols = []
    for N in (64, 128, 256):
        p = SteadyProblem(4, 1.5 * 2 * math.pi / math.sqrt(2), grid_size=N)
        s = p.manifold().nodes
        sols.append(newton_solve(p, p.constant_solution() + 0.3 * np.cos(2 * np.pi * s / p.L),
                                 morse=False).u.values)
    ratios["Delaunay solution"] = order([np.abs(sols[0] - sols[1][::2]).max(),
                                         np.abs(sols[1][::2] - sols[2][::4]).max(), 1.0])[:1]
    return ratios


def test_acceptance_10_property_suites(request, property_suite_outcomes):
    ratios = _grid_order_panel()
    for name, rs in ratios.items():
        _say(f"grid order {name}: {[round(float(r), 3) for r in rs]}")
        assert all(abs(r - 4) <= 0.5 for r in rs), name
    others = {it.nodeid for it in request.session.items if "test_acceptance.py" not in it.nodeid}
    if others:
        # the other modules ran earlier in this session
        failed = sorted(k for k, ok in property_suite_outcomes.items() if not ok)
        missing = sorted(others - set(property_suite_outcomes))
        assert not failed, failed
        assert not missing, missing
    else:
        proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
                               str(TESTS), "--ignore", str(TESTS / "test_acceptance.py")],
                              capture_output=True, text=True, check=False)
        assert proc.returncode == 0, proc.stdout[-3000:]
