"""The reduced energy F(xi, eps) of a Weyl-tensor perturbation of the bubble.

F(xi, eps) is the sum of three integrals over R^n of the bubble
u = u_(xi,eps) against the barred field Hbar_ik(x) = (1 - |x|^2) W_ipkq x_p x_q:

    term1 =  1/2 int sum_l (sum_i Hbar_il d_i u)^2
    term2 = -(n-2)/(16(n-1)) int sum_ikl (d_l Hbar_ik)^2 u^2
    term3 =  int sum_ik Hbar_ik d_i d_k u z

where z solves the linearised critical equation with source
sum_ik Hbar_ik d_i d_k u, constrained to be orthogonal to the n+1
kernel directions of the linearisation.

Angular integrals are done exactly with Wick (pairing) averages over the
unit sphere; radial integrals by adaptive quadrature after the
substitution r = eps t/(1-t).  At xi = 0 there is a closed form, which this
module reproduces through the term-by-term route.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import reduce

import numpy as np
from scipy import integrate, sparse
from scipy.sparse.linalg import splu
from scipy.special import beta

from .geometry import sphere_area
from .weyl import AlgebraicWeyl, derivative_tensor, weyl_coupling_norm


# angular averages

def _double_factorial(k: int) -> int:
    return 1 if k <= 0 else reduce(lambda a, b: a * b, range(k, 0, -2))


def _wick_denominator(n: int, pairs: int) -> int:
    return reduce(lambda a, b: a * b, (n + 2 * j for j in range(pairs)), 1)


def sphere_moment(exponents, n: int | None = None) -> Fraction:
    """Exact average of prod_i xhat_i^{a_i} over S^{n-1} (distinct coordinates)."""
    exps = [int(a) for a in exponents]
    if n is None:
        n = len(exps)
    if len(exps) > n or any(a < 0 for a in exps):
        raise ValueError("need at most n non-negative exponents")
    total = sum(exps)
    if any(a % 2 for a in exps):
        return Fraction(0)
    if total > 8:
        raise ValueError(f"total degree {total} exceeds 8")
    num = reduce(lambda a, b: a * b, (_double_factorial(a - 1) for a in exps), 1)
    return Fraction(num, _wick_denominator(n, total // 2))


def _matchings(items):
    if not items:
        yield []
        return
    a = items[0]
    for i in range(1, len(items)):
        rest = items[1:i] + items[i + 1:]
        for m in _matchings(rest):
            yield [(a, items[i])] + m


def sphere_average(subscripts: str, *operands, slots: str, n: int):
    """Average over S^{n-1} of an einsum expression with unit-vector slots.

    ``slots`` lists the subscript letters that carry a factor xhat; the
    average sums the contraction over all perfect matchings of the slots
    and divides by n(n+2)...(n+2k-2).
    """
    if len(slots) % 2:
        out = subscripts.split("->")[1]
        return np.zeros((n,) * len(out)) if out else 0.0
    inputs, output = subscripts.split("->")
    total = 0.0
    for m in _matchings(list(slots)):
        sub = inputs
        for a, b in m:
            sub = sub.replace(b, a)
        total = total + np.einsum(sub + "->" + output, *operands, optimize=True)
    return total / _wick_denominator(n, len(slots) // 2)


# symmetric tensors standing for homogeneous polynomials

def _sym(T: np.ndarray, k: int) -> np.ndarray:
    """Symmetrise over the last k axes."""
    if k < 2:
        return T
    lead = T.ndim - k
    acc = np.zeros_like(T)
    for p in itertools.permutations(range(k)):
        acc += T.transpose(tuple(range(lead)) + tuple(lead + q for q in p))
    return acc / math.factorial(k)


def _trace_last_pair(T: np.ndarray, times: int = 1) -> np.ndarray:
    for _ in range(times):
        T = np.trace(T, axis1=-2, axis2=-1)
    return T


def _times_r2(T: np.ndarray, n: int, lead: int = 0) -> np.ndarray:
    """Tensor of |y|^2 P(y) from that of P (symmetric in its last m axes)."""
    m = T.ndim - lead
    k = m + 2
    I = np.eye(n)
    acc = None
    for a, b in itertools.combinations(range(k), 2):
        rest = [s for s in range(k) if s not in (a, b)]
        # outer product delta_{y_a y_b} T(rest)
        out = np.multiply.outer(T, I)  # axes: lead, rest..., a, b
        term = np.moveaxis(out, [lead + m, lead + m + 1] + [lead + pos for pos in range(m)],
                           [lead + a, lead + b] + [lead + s for s in rest])
        acc = term if acc is None else acc + term
    return acc / math.comb(k, 2)


def harmonic_decomposition(P: np.ndarray, n: int) -> list:
    """Split a symmetric tensor P of order d as sum_k |y|^{2k} h_{d-2k}(y).

    Each h is trace-free (a harmonic polynomial).  Returns [(k, h), ...].
    """
    d = P.ndim
    if d < 2:
        return [(0, P)]
    T = _trace_last_pair(P)
    parts = harmonic_decomposition(T, n)
    # Lap P = d(d-1) T and Lap(|y|^{2k+2} q_m) = (2k+2)(2k+n+2m) |y|^{2k} q_m
    q_parts = []
    for k, g in parts:
        m = g.ndim
        q_parts.append((k, d * (d - 1) * g / ((2 * k + 2) * (2 * k + n + 2 * m))))
    Qt = np.zeros_like(P)
    for k, q in q_parts:
        t = q
        for _ in range(k + 1):
            t = _times_r2(t, n)
        Qt += t
    return [(0, P - Qt)] + [(k + 1, q) for k, q in q_parts]


def pair_average(A: np.ndarray, B: np.ndarray, d1: int, d2: int, n: int) -> float:
    """<A(yhat) . B(yhat)> over S^{n-1} for tensors symmetric in their last d1 / d2 axes.

    Leading axes of A and B (equal shapes) are contracted.
    """
    if (d1 + d2) % 2:
        return 0.0
    total = 0.0
    for k in range(min(d1, d2) + 1):
        if (d1 - k) % 2 or (d2 - k) % 2:
            continue
        At = _trace_last_pair(A, (d1 - k) // 2)
        Bt = _trace_last_pair(B, (d2 - k) // 2)
        count = (math.comb(d1, k) * math.comb(d2, k) * math.factorial(k)
                 * _double_factorial(d1 - k - 1) * _double_factorial(d2 - k - 1))
        total += count * float(np.sum(At * Bt))
    return total / _wick_denominator(n, (d1 + d2) // 2)


class TPoly:
    """Polynomial in y (and in a scalar alpha) with tensor coefficients.

    ``terms[(a, d)]`` has shape lead + (n,)*d and is symmetric in its last d
    axes; it stands for alpha^a P_d(y).
    """

    _Y = "ABCDEFGHJKLM"

    def __init__(self, n: int, lead: str, terms: dict | None = None):
        self.n = n
        self.lead = lead
        self.terms = {} if terms is None else terms

    def add_term(self, a: int, d: int, T: np.ndarray):
        if not np.any(T):
            return
        key = (a, d)
        self.terms[key] = self.terms[key] + T if key in self.terms else T

    def __add__(self, other: "TPoly") -> "TPoly":
        out = TPoly(self.n, self.lead, dict(self.terms))
        for (a, d), T in other.terms.items():
            out.add_term(a, d, T)
        return out

    def scale(self, s: float) -> "TPoly":
        return TPoly(self.n, self.lead, {k: s * v for k, v in self.terms.items()})

    def times_alpha(self) -> "TPoly":
        return TPoly(self.n, self.lead, {(a + 1, d): v for (a, d), v in self.terms.items()})

    def mul(self, other: "TPoly", spec: str) -> "TPoly":
        """Product with lead indices combined by an einsum spec such as 'l,ik->ikl'."""
        left, out = spec.split("->")
        l1, l2 = left.split(",")
        res = TPoly(self.n, out)
        for (a1, d1), T1 in self.terms.items():
            for (a2, d2), T2 in other.terms.items():
                y1 = self._Y[:d1]
                y2 = self._Y[d1:d1 + d2]
                T = np.einsum(f"{l1}{y1},{l2}{y2}->{out}{y1}{y2}", T1, T2, optimize=True)
                res.add_term(a1 + a2, d1 + d2, _sym(T, d1 + d2))
        return res

    @classmethod
    def coordinate(cls, n: int) -> "TPoly":
        """The vector y, lead index 'a'."""
        return cls(n, "a", {(0, 1): np.eye(n)})

    @classmethod
    def affine(cls, n: int, xi: np.ndarray) -> "TPoly":
        """xi + y."""
        p = cls(n, "a", {(0, 1): np.eye(n)})
        p.add_term(0, 0, np.asarray(xi, dtype=float).copy())
        return p

    def bar_factor(self, xi: np.ndarray) -> "TPoly":
        """Multiply by alpha - 2 xi.y (= 1 - |xi+y|^2 with |y|^2 = rho^2 absorbed in alpha)."""
        lin = TPoly(self.n, "", {})
        lin.add_term(0, 1, -2.0 * np.asarray(xi, dtype=float))
        return self.times_alpha() + self.mul(lin, f"{self.lead},->{self.lead}")

    def averages(self) -> dict:
        """<|P(rho yhat)|^2> as {(alpha power, rho power): coefficient}."""
        out: dict = {}
        items = list(self.terms.items())
        for (a1, d1), T1 in items:
            for (a2, d2), T2 in items:
                v = pair_average(T1, T2, d1, d2, self.n)
                if v != 0.0:
                    key = (a1 + a2, d1 + d2)
                    out[key] = out.get(key, 0.0) + v
        return out


def shifted_quadratic(W: AlgebraicWeyl, xi) -> TPoly:
    """H_ik(xi + y) as a polynomial in y, lead 'ik'."""
    C = W.components
    n = W.n
    xi = np.asarray(xi, dtype=float)
    P = TPoly(n, "ik")
    P.add_term(0, 0, np.einsum("ipkq,p,q->ik", C, xi, xi))
    P.add_term(0, 1, np.einsum("ipkq,p->ikq", C, xi) + np.einsum("ipkq,q->ikp", C, xi))
    P.add_term(0, 2, _sym(C.transpose(0, 2, 1, 3), 2))
    return P


def shifted_gradient(W: AlgebraicWeyl, xi) -> TPoly:
    """d_l H_ik(xi + y) = B_ilkq (xi + y)_q, lead 'ikl'."""
    B = derivative_tensor(W)
    P = TPoly(W.n, "ikl")
    P.add_term(0, 0, np.einsum("ilkq,q->ikl", B, np.asarray(xi, dtype=float)))
    P.add_term(0, 1, B.transpose(0, 2, 1, 3).copy())
    return P


def _check_dense(n: int, order: int, what: str, limit: float = 4e7):
    if float(n) ** order > limit:
        raise ValueError(f"{what} needs dense tensors of size n^{order} = {n ** order:.3g}; "
                         f"use the xi = 0 routines for this dimension")


# context and closed form

@dataclass(frozen=True, eq=False)
class ReducedEnergyContext:
    n: int
    W: AlgebraicWeyl
    r_max_factor: float = 100.0
    radial_grid_size: int = 4000
    harmonic_degree_max: int = 6

    def __post_init__(self):
        if self.n == 10:
            raise ValueError("n = 10 singular denominator in the closed form (n - 10)")
        if self.n < 11:
            raise ValueError(f"reduced energy needs n >= 11, got n = {self.n}")
        if self.W.n != self.n:
            raise ValueError(f"Weyl tensor has dimension {self.W.n}, context has {self.n}")
        if self.harmonic_degree_max < 6:
            raise ValueError("harmonic_degree_max must be >= 6")

    def r_max(self, eps: float) -> float:
        return self.r_max_factor * max(eps, 1.0)


def radial_integral_In(n: int) -> float:
    """int_0^inf (1+r^2)^{2-n} r^{n+3} dr = 1/2 B((n+4)/2, (n-8)/2)."""
    return 0.5 * beta((n + 4) / 2.0, (n - 8) / 2.0)


def _bracket(n: int, eps):
    eps = np.asarray(eps, dtype=float)
    return (n - 8) / (n + 4) * eps ** 4 - 2 * eps ** 6 + (n + 8) / (n - 10) * eps ** 8


def F0_closed_form(ctx: ReducedEnergyContext, eps):
    n = ctx.n
    pref = -(n - 2) * (n + 4) / (16.0 * n * (n - 1) * (n + 2))
    return pref * sphere_area(n) * weyl_coupling_norm(ctx.W) * _bracket(n, eps) \
        * radial_integral_In(n)


# radial quadrature

class QuadratureError(RuntimeError):
    pass


def _radial_quad(log_weight, poly, eps: float, rtol: float = 1e-10):
    """int_0^inf exp(log_weight(r)) poly(r) dr with r = eps t/(1-t)."""

    def f(t):
        if t <= 0.0 or t >= 1.0:
            return 0.0
        r = eps * t / (1.0 - t)
        jac = eps / (1.0 - t) ** 2
        return math.exp(log_weight(r)) * poly(r) * jac

    val, err = integrate.quad(f, 0.0, 1.0, epsabs=0.0, epsrel=rtol * 1e-2, limit=400)
    # tail beyond r = 1e4 eps as a convergence diagnostic
    t_cut = 1e4 / (1.0 + 1e4)
    tail, _ = integrate.quad(f, t_cut, 1.0, epsabs=0.0, epsrel=1e-6, limit=200)
    if err > rtol * max(abs(val), 1e-300) and abs(val) > 0:
        raise QuadratureError(f"radial quadrature did not converge: value {val:.6g}, "
                              f"error estimate {err:.3g}, tail beyond 1e4 eps {tail:.3g}")
    return val, err, tail


def _log_u2_weight(n: int, eps: float):
    # r^{n-1} u^2 = r^{n-1} eps^{n-2} (eps^2 + r^2)^{2-n}
    return lambda r: (n - 1) * math.log(r) + (n - 2) * math.log(eps) \
        - (n - 2) * math.log(eps * eps + r * r)


def _log_du2_weight(n: int, eps: float):
    # r^{n-1} (u'/r)^2 = (n-2)^2 r^{n-1} eps^{n-2} (eps^2 + r^2)^{-n}
    return lambda r: 2 * math.log(n - 2) + (n - 1) * math.log(r) + (n - 2) * math.log(eps) \
        - n * math.log(eps * eps + r * r)


@dataclass
class F0Terms:
    total: float
    term1: float
    term2: float
    term3: float
    quad_error: float = 0.0
    tail: float = 0.0


@dataclass
class AngularMoments:
    """Sphere averages of the polynomial integrands at xi = 0."""

    A4: float  # <sum_ik H_ik^2>
    C4: float  # <sum x_l H_ik d_l H_ik>
    A2: float  # <sum_ikl (d_l H_ik)^2>
    T6: float  # <sum_l (sum_i H_il x_i)^2>


def angular_moments(W: AlgebraicWeyl) -> AngularMoments:
    n = W.n
    C = W.components
    B = derivative_tensor(W)
    A4 = sphere_average("iakb,ickd->", C, C, slots="abcd", n=n)
    C4 = sphere_average("iakb,ickd->", C, B, slots="abcd", n=n)
    A2 = sphere_average("ilka,ilkb->", B, B, slots="ab", n=n)
    T6 = sphere_average("ablc,delf->", C, C, slots="abcdef", n=n)
    return AngularMoments(float(A4), float(C4), float(A2), float(T6))


def F0_quadrature(ctx: ReducedEnergyContext, eps: float,
                  moments: AngularMoments | None = None) -> F0Terms:
    """F(0, eps) assembled term by term."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    n = ctx.n
    mo = moments if moments is not None else angular_moments(ctx.W)
    area = sphere_area(n)
    # |d Hbar|^2 = 4 r^6 A4 - 4 r^4 (1 - r^2) C4 + (1 - r^2)^2 r^2 A2 on average
    poly2 = lambda r: 4 * r ** 6 * mo.A4 - 4 * r ** 4 * (1 - r * r) * mo.C4 \
        + (1 - r * r) ** 2 * r * r * mo.A2
    v2, e2, t2 = _radial_quad(_log_u2_weight(n, eps), poly2, eps)
    term2 = -(n - 2) / (16.0 * (n - 1)) * area * v2
    # sum_l (sum_i Hbar_il d_i u)^2 = (u'/r)^2 (1 - r^2)^2 r^6 T6
    poly1 = lambda r: (1 - r * r) ** 2 * r ** 6 * mo.T6
    if mo.T6 == 0.0:
        v1 = 0.0
    else:
        v1, _, _ = _radial_quad(_log_du2_weight(n, eps), poly1, eps)
    term1 = 0.5 * area * v1
    term3 = z_solve(ctx, np.zeros(n), eps).coupling_integral()
    return F0Terms(term1 + term2 + term3, term1, term2, term3, e2 * area, t2 * area)


# critical scale and dimension

@dataclass
class CriticalEpsilon:
    n: int
    discriminant: Fraction
    s_roots: list
    eps: list
    second_derivative_signs: list

    @property
    def exists(self) -> bool:
        return bool(self.eps)


def critical_epsilon(n) -> CriticalEpsilon:
    """Positive critical points of eps -> F(0, eps); ``n`` may be a context.

    With s = eps^2 the derivative of the bracket vanishes when
    a - 3 s + 2 b s^2 = 0, a = (n-8)/(n+4), b = (n+8)/(n-10).
    """
    if isinstance(n, ReducedEnergyContext):
        n = n.n
    if n < 11:
        raise ValueError(f"need n >= 11, got n = {n}")
    a = Fraction(n - 8, n + 4)
    b = Fraction(n + 8, n - 10)
    disc = 9 - 8 * a * b
    roots, eps, signs = [], [], []
    if disc >= 0:
        sq = _exact_sqrt(disc)
        cand = [(3 - sq) / (4 * b), (3 + sq) / (4 * b)]
        for s in sorted(set(cand)):
            if s > 0:
                roots.append(s)
                e = math.sqrt(float(s))
                eps.append(e)
                # at a root bracket'' = 8 eps^4 (4 b s - 3); F has the opposite sign
                g2 = 4 * b * s - 3
                signs.append(-int(np.sign(float(g2))))
    return CriticalEpsilon(n, disc, roots, eps, signs)


def _exact_sqrt(q: Fraction):
    """Exact square root of a rational when it is a perfect square, else float."""
    p, r = q.numerator, q.denominator
    sp, sr = math.isqrt(p), math.isqrt(r)
    if sp * sp == p and sr * sr == r:
        return Fraction(sp, sr)
    return math.sqrt(float(q))


def critical_dimension_scan(n_range) -> int | None:
    """Smallest n in the range with a real pair of critical scales."""
    for n in n_range:
        if n >= 11 and critical_epsilon(n).exists:
            return int(n)
    return None


# constrained radial problems

class SingularSectorError(RuntimeError):
    pass


@dataclass
class RadialGrid:
    """Nodes rho = sigma sinh(t), t uniform on [0, T]."""

    sigma: float
    t: np.ndarray
    rho: np.ndarray
    drho: np.ndarray
    weights: np.ndarray  # trapezoid weights in rho (times rho'(t))

    @classmethod
    def build(cls, sigma: float, r_max: float, size: int) -> "RadialGrid":
        T = math.asinh(r_max / sigma)
        t = np.linspace(0.0, T, size + 1)
        dt = t[1] - t[0]
        rho = sigma * np.sinh(t)
        drho = sigma * np.cosh(t)
        w = np.full(t.size, dt)
        w[[0, -1]] *= 0.5
        return cls(sigma, t, rho, drho, w * drho)

    def integrate(self, f, n: int) -> float:
        return float(np.sum(self.weights * self.rho ** (n - 1) * f))


def _bubble_radial(n: int, eps: float, rho):
    return (eps / (eps * eps + rho * rho)) ** ((n - 2) / 2.0)


def constraint_profile(n: int, eps: float, j: int, rho) -> np.ndarray:
    """Radial factor of the kernel constraint functions for sector j in {0, 1}."""
    s = eps * eps + rho * rho
    up = _bubble_radial(n, eps, rho) ** ((n + 2) / (n - 2.0))
    if j == 0:
        return (eps * eps - rho * rho) / s * up
    return 2 * eps * rho / s * up


def source_weight(n: int, eps: float, rho) -> np.ndarray:
    """b(rho) with sum Hbar_ik d_i d_k u = b(rho) sum Hbar_ik y_i y_k."""
    a = (n - 2) / 2.0
    return n * (n - 2) * eps ** a * (eps * eps + rho * rho) ** (-a - 2)


def solve_radial_sector(n: int, eps: float, j: int, grid: RadialGrid, f: np.ndarray,
                        constrained: bool | None = None, sector_id=None):
    """Solve z'' + (n-1)/rho z' - j(j+n-2)/rho^2 z + n(n+2)u^{4/(n-2)} z = f (+ mu phi).

    Regularity at rho = 0, Robin condition z' + (n-2+j)/rho z = 0 at the
    outer node.  For j in {0, 1} (unless ``constrained`` is False) the
    constraint int phi_j z rho^{n-1} = 0 is appended with a multiplier mu.
    Returns (z, mu).
    """
    if constrained is None:
        constrained = j <= 1
    t, rho, d1 = grid.t, grid.rho, grid.drho
    M = t.size
    dt = t[1] - t[0]
    lam = j * (j + n - 2)
    V = n * (n + 2) * eps ** 2 / (eps * eps + rho * rho) ** 2
    rows, cols, vals = [], [], []

    def put(i, k, v):
        rows.append(i)
        cols.append(k)
        vals.append(v)

    # centre
    if j == 0:
        c = 2.0 * n / (dt * dt * d1[0] ** 2)
        put(0, 0, -c + V[0])
        put(0, 1, c)
    else:
        put(0, 0, 1.0)
    kk = n - 2 + j
    for i in range(1, M):
        a2 = 1.0 / d1[i] ** 2
        a1 = -rho[i] / d1[i] ** 3 + (n - 1) / (rho[i] * d1[i])
        lo = a2 / dt ** 2 - a1 / (2 * dt)
        hi = a2 / dt ** 2 + a1 / (2 * dt)
        diag = -2 * a2 / dt ** 2 - lam / rho[i] ** 2 + V[i]
        if i < M - 1:
            put(i, i - 1, lo)
            put(i, i, diag)
            put(i, i + 1, hi)
        else:
            # ghost z_{M} = z_{M-2} - 2 dt rho' (kk/rho) z_{M-1}
            put(i, i - 1, lo + hi)
            put(i, i, diag - hi * 2 * dt * d1[i] * kk / rho[i])
    rhs = np.asarray(f, dtype=float).copy()
    if j >= 1:
        rhs[0] = 0.0
    size = M + 1 if constrained else M
    if constrained:
        phi = constraint_profile(n, eps, j, rho)
        col = phi.copy()
        if j >= 1:
            col[0] = 0.0
        for i in range(M):
            put(i, M, -col[i])
        cw = grid.weights * rho ** (n - 1) * phi
        scale = np.abs(cw).max()
        for i in range(M):
            put(M, i, cw[i] / scale)
        rhs = np.concatenate([rhs, [0.0]])
    A = sparse.csc_matrix((vals, (rows, cols)), shape=(size, size))
    try:
        lu = splu(A)
    except RuntimeError as exc:
        raise SingularSectorError(f"singular radial system in sector {sector_id or j}") from exc
    sol = lu.solve(rhs)
    if not np.all(np.isfinite(sol)):
        raise SingularSectorError(f"singular radial system in sector {sector_id or j}")
    if constrained:
        return sol[:M], float(sol[M])
    return sol, 0.0


def _source_polynomial(W: AlgebraicWeyl, xi) -> TPoly:
    """(alpha - 2 xi.y) sum_ik H_ik(xi+y) y_i y_k as a polynomial in y."""
    n = W.n
    xi = np.asarray(xi, dtype=float)
    H = shifted_quadratic(W, xi)
    Y = TPoly.coordinate(n)
    S = H.mul(Y, "ik,i->k").mul(Y, "k,k->")
    return S.bar_factor(xi)


@dataclass
class SectorSolution:
    j: int
    key: tuple  # (alpha power, polynomial degree, |y|^2 power)
    harmonic: np.ndarray
    z: np.ndarray
    multiplier: float
    source: np.ndarray


@dataclass
class ZSolution:
    n: int
    eps: float
    xi: np.ndarray
    grid: RadialGrid
    sectors: list = field(default_factory=list)
    source_max: float = 0.0

    def max_abs(self) -> float:
        """sup |z| over the radial grid (bounded by sum of sector sup norms)."""
        if not self.sectors:
            return 0.0
        return float(sum(np.abs(s.z).max() * np.sqrt(np.sum(s.harmonic ** 2)) for s in self.sectors))

    def coupling_integral(self) -> float:
        """int sum Hbar_ik d_i d_k u z = sum over sector pairs of the same degree."""
        n = self.n
        area = sphere_area(n)
        total = 0.0
        for a in self.sectors:
            for b in self.sectors:
                if a.j != b.j:
                    continue
                ang = pair_average(a.harmonic, b.harmonic, a.j, a.j, n)
                if ang == 0.0:
                    continue
                total += area * ang * self.grid.integrate(a.source * b.z, n)
        return total

    def constraint_residuals(self) -> list:
        """Relative constraint integrals per constrained sector."""
        out = []
        for s in self.sectors:
            if s.j > 1:
                continue
            phi = constraint_profile(self.n, self.eps, s.j, self.grid.rho)
            val = self.grid.integrate(phi * s.z, self.n)
            scale = self.grid.integrate(np.abs(phi * s.z), self.n)
            out.append((s.key, s.j, val, val / scale if scale > 0 else 0.0))
        return out


def z_solve(ctx: ReducedEnergyContext, xi, eps: float, grid_size: int | None = None) -> ZSolution:
    """Constrained solution z of the linearised equation, sector by sector."""
    n = ctx.n
    xi = np.asarray(xi, dtype=float)
    if not eps > 0:
        raise ValueError("eps must be positive")
    if np.any(xi):
        _check_dense(n, 5, "z_solve at xi != 0")
    grid = RadialGrid.build(eps, ctx.r_max(eps), grid_size or ctx.radial_grid_size)
    rho = grid.rho
    alpha = 1.0 - float(xi @ xi) - rho ** 2
    b = source_weight(n, eps, rho)
    P = _source_polynomial(ctx.W, xi)
    sol = ZSolution(n, eps, xi, grid)
    wscale = max(np.linalg.norm(ctx.W.components), 1e-300)
    for (a, d), T in sorted(P.terms.items()):
        if d > ctx.harmonic_degree_max:
            raise ValueError(f"source degree {d} exceeds harmonic_degree_max")
        sol.source_max = max(sol.source_max, float(np.abs(T).max()) / wscale)
        radial = b * alpha ** a * rho ** d
        for k, h in harmonic_decomposition(T, n):
            j = d - 2 * k
            if not np.any(h):
                continue
            z, mu = solve_radial_sector(n, eps, j, grid, radial, sector_id=(a, d, k))
            sol.sectors.append(SectorSolution(j, (a, d, k), h, z, mu, radial))
    return sol


# general xi

def F_general(ctx: ReducedEnergyContext, xi, eps: float) -> F0Terms:
    """F(xi, eps) with exact angular averages about xi and sector-wise z."""
    n = ctx.n
    xi = np.asarray(xi, dtype=float)
    _check_dense(n, 6, "F_general")
    W = ctx.W
    r2xi = float(xi @ xi)
    area = sphere_area(n)
    H = shifted_quadratic(W, xi)
    Y = TPoly.coordinate(n)
    X = TPoly.affine(n, xi)
    # w_l = sum_i Hbar_il(xi+y) y_i,  v_ikl = d_l Hbar_ik(xi+y)
    w = H.mul(Y, "il,i->l").bar_factor(xi)
    v = X.mul(H, "l,ik->ikl").scale(-2.0) + shifted_gradient(W, xi).bar_factor(xi)

    def poly_from(avg):
        def p(r):
            al = 1.0 - r2xi - r * r
            return sum(c * al ** a * r ** d for (a, d), c in avg.items())
        return p

    avg_w, avg_v = w.averages(), v.averages()
    term1 = 0.0
    if avg_w:
        v1, _, _ = _radial_quad(_log_du2_weight(n, eps), poly_from(avg_w), eps)
        term1 = 0.5 * area * v1
    term2 = 0.0
    e2 = t2 = 0.0
    if avg_v:
        v2, e2, t2 = _radial_quad(_log_u2_weight(n, eps), poly_from(avg_v), eps)
        term2 = -(n - 2) / (16.0 * (n - 1)) * area * v2
    term3 = z_solve(ctx, xi, eps).coupling_integral()
    return F0Terms(term1 + term2 + term3, term1, term2, term3, e2 * area, t2 * area)
