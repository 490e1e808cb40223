"""Steady solutions on S^{n-1} x S^1(L): Newton, continuation and Morse data.

We solve

    k u'' - R_0 u + c u^{N - delta} = 0,   c = 4n(n-1),  N = (n+2)/(n-2),

for u > 0 depending on the circle coordinate only, on a uniform periodic
grid.  Unknowns are restricted to the even class u(s) = u(-s); this removes
the translation invariance of the circle, so nonconstant solutions are
isolated there.  All counts and indices below refer to that class (and to
functions constant on the S^{n-1} factor), which every report states.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, linalg, optimize

from .geometry import (Field, ProductSL, conformal_coefficient, critical_power,
                       yamabe_energy)


class NewtonError(RuntimeError):
    pass


class ContinuationError(RuntimeError):
    pass


MORSE_CONVENTION = ("second variation constrained to int u^{N-delta} w = 0 in the "
                    "S^{n-1}-invariant sector, summed over S^{n-1} harmonics with multiplicity; "
                    "circle functions restricted to the even class u(s) = u(-s)")
ENUMERATION_CAVEAT = ("solutions enumerated within the S^{n-1}-invariant, reflection-even "
                      "class; numerical enumeration is a lower bound on the solution count")


@dataclass(frozen=True)
class SteadyProblem:
    n: int
    L: float
    delta: float = 0.0
    delta0: float | None = None
    grid_size: int = 256

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 3:
            raise ValueError(f"n must be an integer >= 3, got {self.n}")
        bound = 4.0 / (self.n - 2)
        d0 = self.delta if self.delta0 is None else self.delta0
        if not 0 <= d0 < bound:
            raise ValueError(f"delta0 = {d0} violates 0 <= delta0 < 4/(n-2) = {bound:g}")
        if not 0 <= self.delta <= d0:
            raise ValueError(f"delta = {self.delta} outside [0, delta0 = {d0}]")
        if not self.L > 0:
            raise ValueError("L must be positive")
        if self.grid_size % 2 or self.grid_size < 16:
            raise ValueError("grid_size must be even and >= 16")

    @property
    def c(self) -> float:
        return 4.0 * self.n * (self.n - 1)

    @property
    def exponent(self) -> float:
        return critical_power(self.n) - self.delta

    @property
    def R0(self) -> float:
        return float((self.n - 1) * (self.n - 2))

    def manifold(self) -> ProductSL:
        return ProductSL(self.n, self.L, self.grid_size)

    def constant_solution(self) -> float:
        return (self.R0 / self.c) ** (1.0 / (self.exponent - 1.0))

    def with_params(self, L=None, delta=None) -> "SteadyProblem":
        d = self.delta if delta is None else delta
        d0 = max(self.delta0 if self.delta0 is not None else self.delta, d)
        return SteadyProblem(self.n, self.L if L is None else L, d, d0, self.grid_size)


# even-class discretisation

def _expansion(M: int) -> np.ndarray:
    """u = E v with v = u[0 .. M/2] and u_i = u_{M-i}."""
    half = M // 2
    E = np.zeros((M, half + 1))
    for i in range(M):
        E[i, i if i <= half else M - i] = 1.0
    return E


def _second_difference(M: int) -> np.ndarray:
    K = -2.0 * np.eye(M) + np.eye(M, k=1) + np.eye(M, k=-1)
    K[0, -1] = K[-1, 0] = 1.0
    return K


class _System:
    """G(v; L, delta) and derivatives on the even half-grid."""

    def __init__(self, problem: SteadyProblem):
        self.n = problem.n
        self.M = problem.grid_size
        self.E = _expansion(self.M)
        self.K = _second_difference(self.M)
        self.KE = self.K @ self.E
        self.k = conformal_coefficient(self.n)
        self.R0 = problem.R0
        self.c = problem.c
        self.N = critical_power(self.n)
        self.half = self.M // 2 + 1

    def residual(self, v, L, delta):
        u = self.E @ v
        p = self.N - delta
        G = self.k * (self.M / L) ** 2 * (self.KE @ v) - self.R0 * u + self.c * u ** p
        return G[: self.half]

    def jacobian(self, v, L, delta):
        u = self.E @ v
        p = self.N - delta
        J = self.k * (self.M / L) ** 2 * self.KE + (-self.R0 + self.c * p * u ** (p - 1))[:, None] * self.E
        return J[: self.half]

    def d_param(self, v, L, delta, which):
        u = self.E @ v
        if which == "L":
            d = -2.0 * self.k * self.M ** 2 / L ** 3 * (self.KE @ v)
        else:
            d = -self.c * np.log(u) * u ** (self.N - delta)
        return d[: self.half]


def stencil_residual(problem: SteadyProblem, u) -> float:
    """Max-norm residual from an explicit periodic stencil (independent of the matrices)."""
    u = u.values if isinstance(u, Field) else np.asarray(u, dtype=float)
    h = problem.L / u.size
    upp = (np.roll(u, -1) - 2 * u + np.roll(u, 1)) / h ** 2
    G = conformal_coefficient(problem.n) * upp - problem.R0 * u + problem.c * u ** problem.exponent
    return float(np.abs(G).max())


# records

@dataclass
class SolutionRecord:
    u: Field
    delta: float
    L: float
    residual: float
    energy: float
    morse_index: int | None = None
    nondegenerate: bool | None = None
    min_abs_eigenvalue: float | None = None
    j_max: int | None = None
    iterations: int = 0
    problem: SteadyProblem | None = field(default=None, repr=False)

    @property
    def sup_u(self) -> float:
        return float(self.u.values.max())

    def row(self, arc: int = 0) -> dict:
        return {"arc": arc, "delta": self.delta, "L": self.L, "E": self.energy,
                "index": self.morse_index, "nondegenerate": self.nondegenerate,
                "supU": self.sup_u}


def _make_record(problem: SteadyProblem, u: np.ndarray, iterations: int, morse: bool,
                 j_max=None) -> SolutionRecord:
    m = problem.manifold()
    rec = SolutionRecord(Field(m, u), problem.delta, problem.L, stencil_residual(problem, u),
                         yamabe_energy(m, u), iterations=iterations, problem=problem)
    if morse:
        morse_index(rec, j_max)
    return rec


def newton_solve(problem: SteadyProblem, u_init, tol: float = 1e-10, max_iter: int = 60,
                 morse: bool = True) -> SolutionRecord:
    """Damped Newton iteration in the even class."""
    u0 = np.asarray(u_init.values if isinstance(u_init, Field) else u_init, dtype=float)
    if u0.shape != (problem.grid_size,):
        raise ValueError(f"initial guess has shape {u0.shape}, grid has {problem.grid_size} nodes")
    if not np.all(u0 > 0):
        raise ValueError("newton_solve needs u_init > 0 everywhere")
    sysm = _System(problem)
    # project onto the even class
    v = 0.5 * (u0 + np.roll(u0[::-1], 1))[: sysm.half]
    v, it = _newton(sysm, v, problem.L, problem.delta, tol, max_iter)
    return _make_record(problem, sysm.E @ v, it, morse)


def _newton(sysm: _System, v, L, delta, tol, max_iter):
    """Newton iteration in w = u^p (p = N - delta), damped only to keep w > 0.

    Iterating in w rather than u enlarges the basins of the nonconstant
    solutions considerably (u-Newton from moderate cosine seeds tends to
    fall back to the constant).
    """
    p = sysm.N - delta
    G = sysm.residual(v, L, delta)
    for it in range(max_iter + 1):
        if not np.all(np.isfinite(G)):
            raise NewtonError("non-finite residual during Newton iteration")
        if np.abs(G).max() <= tol:
            return v, it
        if it == max_iter:
            break
        w = v ** p
        Jw = sysm.jacobian(v, L, delta) * (v ** (1.0 - p) / p)[None, :]
        try:
            dw = np.linalg.solve(Jw, -G)
        except np.linalg.LinAlgError as exc:
            raise NewtonError("singular Jacobian") from exc
        lam = 1.0
        while not np.all(w + lam * dw > 0):
            lam *= 0.5
            if lam < 1e-8:
                raise NewtonError("positivity lost: damping could not keep u > 0")
        v = (w + lam * dw) ** (1.0 / p)
        G = sysm.residual(v, L, delta)
    raise NewtonError(f"Newton did not converge in {max_iter} iterations "
                      f"(residual {np.abs(G).max():.3g})")


# spectra

def sphere_harmonic_multiplicity(j: int, n: int) -> int:
    """Dimension of degree-j harmonics on S^{n-1}."""
    d = n  # ambient dimension of S^{n-1}
    if j == 0:
        return 1
    return math.comb(j + d - 1, d - 1) - math.comb(j + d - 3, d - 1)


def _sector_forms(problem: SteadyProblem, u: np.ndarray):
    """Symmetric pieces of the second variation in the even basis: (stiffness, mass, potential)."""
    M = problem.grid_size
    E = _expansion(M)
    K = _second_difference(M)
    h = problem.L / M
    k = conformal_coefficient(problem.n)
    p = problem.exponent
    V = problem.c * p * u ** (p - 1) - problem.R0  # A_j = -k(D^2 - lam_j) - V
    B = E.T @ E
    S = -k / h ** 2 * (E.T @ K @ E)
    P = E.T @ (V[:, None] * E)
    return S, B, P, V


def morse_index(record: SolutionRecord, j_max: int | None = None,
                degeneracy_tol: float = 1e-7) -> int:
    """Constrained Morse index; fills record.morse_index / nondegenerate / min_abs_eigenvalue."""
    problem = record.problem
    if problem is None:
        raise ValueError("record has no problem attached")
    u = record.u.values
    n = problem.n
    k = conformal_coefficient(n)
    S, B, P, V = _sector_forms(problem, u)
    h = problem.L / problem.grid_size
    scale = 4 * k / h ** 2 + np.abs(V).max()
    tol = degeneracy_tol * scale
    lam = lambda j: j * (j + n - 2)
    j_needed = 0
    while k * lam(j_needed + 1) <= V.max():
        j_needed += 1
    if j_max is None:
        j_max = j_needed
    elif j_max < j_needed:
        raise ValueError(f"j_max = {j_max} too small: sector j = {j_needed} can still be negative "
                         f"(need k j(j+n-2) > max potential {V.max():.4g})")
    index = 0
    min_abs = np.inf
    # constraint in the invariant sector: int u^p w = 0
    cvec = (_expansion(problem.grid_size).T @ (u ** problem.exponent))[None, :]
    Q = linalg.null_space(cvec)
    for j in range(j_max + 1):
        A = S + k * lam(j) * B - P
        if j == 0:
            ev = linalg.eigh(Q.T @ A @ Q, Q.T @ B @ Q, eigvals_only=True)
        else:
            ev = linalg.eigh(A, B, eigvals_only=True)
        index += sphere_harmonic_multiplicity(j, n) * int(np.sum(ev < -tol))
        min_abs = min(min_abs, float(np.abs(ev).min()))
    record.morse_index = int(index)
    record.min_abs_eigenvalue = min_abs
    record.nondegenerate = bool(min_abs > tol)
    record.j_max = int(j_max)
    return int(index)


def _free_spectrum(problem: SteadyProblem, u: np.ndarray):
    """Eigenpairs of the unconstrained invariant-sector second variation (even class)."""
    S, B, P, _ = _sector_forms(problem, u)
    return linalg.eigh(S - P, B)


def bifurcation_points_constant_branch(n: int, delta: float = 0.0, count: int = 3) -> list:
    """Lengths L_j where the constant solution has a zero mode cos(2 pi j s / L)."""
    if n < 3:
        raise ValueError("n must be >= 3")
    N = critical_power(n)
    R0 = (n - 1) * (n - 2)
    k = conformal_coefficient(n)
    omega = math.sqrt(R0 * (N - 1 - delta) / k)
    return [2 * math.pi * j / omega for j in range(1, count + 1)]


# continuation

@dataclass
class Bifurcation:
    index: int            # first record past the crossing
    value: float          # refined parameter value
    eigenvector: np.ndarray = field(repr=False)  # critical mode on the even half-grid
    state: np.ndarray = field(repr=False)        # half-grid solution at the crossing


@dataclass
class Branch:
    parameter: str
    records: list = field(default_factory=list)
    turning_points: list = field(default_factory=list)   # (index, parameter value)
    bifurcations: list = field(default_factory=list)     # Bifurcation entries
    base: SteadyProblem | None = field(default=None, repr=False)

    def rows(self) -> list:
        return [r.row(i) for i, r in enumerate(self.records)]

    def values(self) -> np.ndarray:
        return np.array([getattr(r, "L" if self.parameter == "L" else "delta") for r in self.records])


def _param(rec: SolutionRecord, which: str) -> float:
    return rec.L if which == "L" else rec.delta


def _problem_at(base: SteadyProblem, which: str, value: float) -> SteadyProblem:
    return base.with_params(L=value) if which == "L" else base.with_params(delta=value)


def continue_branch(start: SolutionRecord, parameter: str, target: float, ds: float = 0.05,
                    ds_min: float = 1e-8, ds_max: float = 0.5, max_steps: int = 500,
                    tol: float = 1e-10, refine: bool = True) -> Branch:
    """Pseudo-arclength continuation from ``start`` until the parameter reaches ``target``.

    Records turning points (the parameter component of the tangent changes
    sign) and bifurcations (the negative count of the free even-class second
    variation changes without a turning point), refined by secant iteration.
    """
    if parameter not in ("L", "delta"):
        raise ValueError("parameter must be 'L' or 'delta'")
    base = start.problem
    if start.residual > 10 * tol:
        raise ValueError("start record is not converged")
    sysm = _System(base)
    lam0 = _param(start, parameter)
    direction = 1.0 if target > lam0 else -1.0
    if parameter == "delta":
        base = base.with_params(delta=max(lam0, target))
        sysm = _System(base)

    def G(v, lam):
        L, d = (lam, base.delta) if parameter == "L" else (base.L, lam)
        return sysm.residual(v, L, d)

    def Jfull(v, lam):
        L, d = (lam, base.delta) if parameter == "L" else (base.L, lam)
        return np.hstack([sysm.jacobian(v, L, d), sysm.d_param(v, L, d, parameter)[:, None]])

    def tangent(v, lam, prev=None):
        J = Jfull(v, lam)
        t = linalg.null_space(J)[:, 0]
        if prev is not None:
            if np.dot(t, prev) < 0:
                t = -t
        elif t[-1] * direction < 0:
            t = -t
        return t / np.linalg.norm(t)

    def neg_count(v, lam):
        prob = _problem_at(base, parameter, lam)
        ev, _ = _free_spectrum(prob, sysm.E @ v)
        return int(np.sum(ev < 0)), ev

    v = start.u.values[: sysm.half].copy()
    lam = lam0
    branch = Branch(parameter, [start], base=base)
    t = tangent(v, lam)
    count, _ = neg_count(v, lam)
    for _ in range(max_steps):
        if (target - lam) * direction <= 1e-14:
            break
        while True:
            vp, lp = v + ds * t[:-1], lam + ds * t[-1]
            if (lp - target) * direction > 0 and t[-1] * direction > 0:
                # land on the target by a natural-parameter solve
                frac = (target - lam) / (lp - lam)
                try:
                    vn, _ = _newton(sysm if parameter == "L" else _System(_problem_at(base, parameter, target)),
                                    v + frac * (vp - v),
                                    target if parameter == "L" else base.L,
                                    base.delta if parameter == "L" else target, tol, 40)
                    ln = target
                    break
                except NewtonError:
                    ds *= 0.5
                    if ds < ds_min:
                        raise ContinuationError("step underflow while landing on the target")
                    continue
            ok, vn, ln = _corrector(G, Jfull, vp, lp, t, tol)
            if ok and np.all(vn > 0):
                break
            ds *= 0.5
            if ds < ds_min:
                raise ContinuationError(f"continuation step underflow at {parameter} = {lam:.6g}")
        tn = tangent(vn, ln, t)
        new_count, _ = neg_count(vn, ln)
        prob = _problem_at(base, parameter, ln)
        rec = _make_record(prob, sysm.E @ vn, 0, True)
        branch.records.append(rec)
        i = len(branch.records) - 1
        if tn[-1] * t[-1] < 0:
            branch.turning_points.append((i, ln))
        elif new_count != count:
            if refine:
                val, vec, vb = _refine_bifurcation(base, parameter, sysm, v, lam, vn, ln)
            else:
                _, vecs = _free_spectrum(prob, sysm.E @ vn)
                val, vec, vb = ln, vecs[:, 0], vn
            branch.bifurcations.append(Bifurcation(i, val, vec, vb))
        v, lam, t, count = vn, ln, tn, new_count
        ds = min(ds * 1.5, ds_max)
    else:
        raise ContinuationError(f"target {parameter} = {target} not reached in {max_steps} steps")
    return branch


def _corrector(G, Jfull, vp, lp, t, tol, max_iter=12):
    x = np.concatenate([vp, [lp]])
    x0 = x.copy()
    for _ in range(max_iter):
        v, lam = x[:-1], x[-1]
        F = np.concatenate([G(v, lam), [np.dot(t, x - x0)]])
        if np.abs(F[:-1]).max() <= tol and abs(F[-1]) < 1e-12:
            return True, v, lam
        A = np.vstack([Jfull(v, lam), t[None, :]])
        try:
            x = x - np.linalg.solve(A, F)
        except np.linalg.LinAlgError:
            return False, None, None
        if not np.all(x[:-1] > 0):
            return False, None, None
    v, lam = x[:-1], x[-1]
    return (np.abs(G(v, lam)).max() <= tol), v, lam


def _refine_bifurcation(base, which, sysm, v0, l0, v1, l1, tol=1e-10):
    """Secant iteration on the eigenvalue that changes sign between two branch points."""

    def crossing(lam, vguess):
        prob = _problem_at(base, which, lam)
        s2 = _System(prob) if which == "delta" else sysm
        L, d = (lam, base.delta) if which == "L" else (base.L, lam)
        v, _ = _newton(s2, vguess, L, d, tol, 40)
        ev, vec = _free_spectrum(prob, s2.E @ v)
        j = int(np.argmin(np.abs(ev)))  # the eigenvalue passing through zero
        return ev[j], vec[:, j], v

    a, b = l0, l1
    fa, _, va = crossing(a, v0)
    fb, vecb, vb = crossing(b, v1)
    for _ in range(40):
        if abs(b - a) < 1e-12 * max(1.0, abs(b)) or fb == fa:
            break
        c = b - fb * (b - a) / (fb - fa)
        w = (c - a) / (b - a) if b != a else 0.5
        fc, vecc, vc = crossing(c, va + w * (vb - va))
        a, fa, va = b, fb, vb
        b, fb, vb, vecb = c, fc, vc, vecc
        if abs(fb) < 1e-12:
            break
    return float(b), vecb, vb


def switch_branch(branch: Branch, bifurcation: Bifurcation, amplitude: float = 0.02,
                  tol: float = 1e-10, max_iter: int = 40) -> SolutionRecord:
    """A point on the bifurcating branch, a distance ``amplitude`` along the critical mode.

    Solves G(v, lambda) = 0 together with phi.(v - v_b) = amplitude for
    (v, lambda), starting from v_b + amplitude phi at the crossing.
    """
    base, which = branch.base, branch.parameter
    if base is None:
        raise ValueError("branch has no base problem")
    phi = bifurcation.eigenvector / np.linalg.norm(bifurcation.eigenvector)
    vb = bifurcation.state
    lam = bifurcation.value
    if which == "delta":
        base = base.with_params(delta=max(base.delta, lam))
    sysm = _System(base)
    v = vb + amplitude * phi
    for _ in range(max_iter):
        L, d = (lam, base.delta) if which == "L" else (base.L, lam)
        F = np.concatenate([sysm.residual(v, L, d), [phi @ (v - vb) - amplitude]])
        if np.abs(F).max() <= tol:
            break
        J = np.vstack([np.hstack([sysm.jacobian(v, L, d), sysm.d_param(v, L, d, which)[:, None]]),
                       np.concatenate([phi, [0.0]])[None, :]])
        x = np.concatenate([v, [lam]]) - np.linalg.solve(J, F)
        if not np.all(x[:-1] > 0):
            raise NewtonError("positivity lost while switching branches")
        v, lam = x[:-1], x[-1]
    else:
        raise NewtonError("branch switching did not converge")
    return _make_record(_problem_at(base, which, lam), sysm.E @ v, 0, True)


# enumeration and Morse inequalities

def enumerate_solutions(problem: SteadyProblem, amplitudes=(0.1, 0.3, 0.5, 0.7, 0.85),
                        modes=(1, 2, 3), extra=(), tol: float = 1e-10,
                        same: float = 1e-6) -> list:
    """Multi-start Newton over constant +- A cos(2 pi k s / L) seeds; distinct solutions."""
    u0 = problem.constant_solution()
    s = problem.manifold().nodes
    seeds = [np.full(s.size, u0)]
    for k in modes:
        for a in amplitudes:
            for sign in (1, -1):
                seeds.append(u0 * (1 + sign * a * np.cos(2 * np.pi * k * s / problem.L)))
    seeds.extend(np.asarray(e, dtype=float) for e in extra)
    found = []
    for seed in seeds:
        if not np.all(seed > 0):
            continue
        try:
            rec = newton_solve(problem, seed, tol)
        except NewtonError:
            continue
        if all(np.abs(rec.u.values - f.u.values).max() > same for f in found):
            found.append(rec)
    found.sort(key=lambda r: (r.energy, r.u.values[0]))
    return found


@dataclass
class MorseReport:
    tallies: dict
    rows: list  # (l, alternating sum, bound, passed)
    all_pass: bool
    caveat: str = ENUMERATION_CAVEAT
    convention: str = MORSE_CONVENTION


def morse_inequality_check(records, l_max: int | None = None) -> MorseReport:
    records = list(records)
    if not records:
        raise ValueError("no records")
    for r in records:
        if r.morse_index is None:
            morse_index(r)
        if not r.nondegenerate:
            raise ValueError(f"degenerate solution present (min |eigenvalue| "
                             f"{r.min_abs_eigenvalue:.3g}); Morse inequalities need nondegeneracy")
    tallies: dict = {}
    for r in records:
        tallies[r.morse_index] = tallies.get(r.morse_index, 0) + 1
    if l_max is None:
        l_max = max(tallies) + 1
    rows = []
    for l in range(l_max + 1):
        total = sum((-1) ** (l - k) * tallies.get(k, 0) for k in range(l + 1))
        bound = (-1) ** l
        rows.append((l, total, bound, total >= bound))
    return MorseReport(dict(sorted(tallies.items())), rows, all(r[3] for r in rows))


# shooting oracle

def shooting_enumeration(problem: SteadyProblem, samples: int = 400, rtol: float = 1e-11) -> list:
    """Even L-periodic solutions of the continuous ODE by shooting from u(0) = a, u'(0) = 0.

    Returns the sorted list of initial values a with u'(L/2) = 0 inside the
    bounded region 0 < a < a_high, where the potential energy changes sign.
    """
    k = conformal_coefficient(problem.n)
    R0, c, p = problem.R0, problem.c, problem.exponent
    a_high = ((p + 1) * R0 / (2 * c)) ** (1.0 / (p - 1))
    half = problem.L / 2

    def rhs(_, y):
        return [y[1], (R0 * y[0] - c * np.abs(y[0]) ** p) / k]

    def end_slope(a):
        sol = integrate.solve_ivp(rhs, (0.0, half), [a, 0.0], method="DOP853",
                                  rtol=rtol, atol=1e-13)
        return sol.y[1, -1]

    grid = np.linspace(0.0, a_high, samples + 2)[1:-1]
    vals = np.array([end_slope(a) for a in grid])
    roots = []
    for i in range(grid.size - 1):
        if vals[i] == 0:
            roots.append(float(grid[i]))
        elif vals[i] * vals[i + 1] < 0:
            roots.append(float(optimize.brentq(end_slope, grid[i], grid[i + 1], xtol=1e-14)))
    return roots
