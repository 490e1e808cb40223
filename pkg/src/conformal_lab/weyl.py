"""Algebraic Weyl tensors, the quadratic perturbation fields built from
them, and finite-difference curvature of metrics on a Euclidean chart."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.linalg import expm


def kulkarni_nomizu(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(a o b)_ijkl = a_ik b_jl + a_jl b_ik - a_il b_jk - a_jk b_il."""
    return (np.einsum("ik,jl->ijkl", a, b) + np.einsum("jl,ik->ijkl", a, b)
            - np.einsum("il,jk->ijkl", a, b) - np.einsum("jk,il->ijkl", a, b))


def _bianchi(T: np.ndarray) -> np.ndarray:
    return T + T.transpose(0, 2, 3, 1) + T.transpose(0, 3, 1, 2)


@dataclass(frozen=True, eq=False)
class AlgebraicWeyl:
    """Rank-4 tensor on R^n with all algebraic symmetries of a Weyl tensor."""

    components: np.ndarray

    @property
    def n(self) -> int:
        return self.components.shape[0]

    def violations(self) -> dict:
        """Largest violation of each defining identity."""
        W = self.components
        return {
            "antisymmetry": float(max(np.abs(W + W.transpose(1, 0, 2, 3)).max(),
                                      np.abs(W + W.transpose(0, 1, 3, 2)).max())),
            "pair_exchange": float(np.abs(W - W.transpose(2, 3, 0, 1)).max()),
            "bianchi": float(np.abs(_bianchi(W)).max()),
            "trace": float(np.abs(np.einsum("ipiq->pq", W)).max()),
        }

    def is_valid(self, tol: float = 1e-12) -> bool:
        scale = max(1.0, float(np.abs(self.components).max()))
        return all(v <= tol * scale for v in self.violations().values())

    def scaled(self, s: float) -> "AlgebraicWeyl":
        return AlgebraicWeyl(s * self.components)


def project_to_weyl(T, n: int | None = None) -> AlgebraicWeyl:
    """Orthogonal projection of a rank-4 tensor onto the Weyl symmetry class."""
    T = np.asarray(T, dtype=float)
    if n is None:
        n = T.shape[0]
    if n < 3:
        raise ValueError(f"Weyl tensors need n >= 3, got n = {n}")
    if T.shape != (n,) * 4:
        raise ValueError(f"expected a tensor of shape {(n,) * 4}, got {T.shape}")
    T = 0.5 * (T - T.transpose(1, 0, 2, 3))
    T = 0.5 * (T - T.transpose(0, 1, 3, 2))
    T = 0.5 * (T + T.transpose(2, 3, 0, 1))
    # on this space the totally antisymmetric part is a third of the Bianchi sum
    T = T - _bianchi(T) / 3.0
    ric = np.einsum("ipiq->pq", T)
    P = (ric - np.trace(ric) / (2.0 * (n - 1)) * np.eye(n)) / (n - 2)
    return AlgebraicWeyl(T - kulkarni_nomizu(P, np.eye(n)))


def weyl_coupling_norm(W: AlgebraicWeyl) -> float:
    """sum_{ijkl} (W_ijkl + W_ilkj)^2."""
    C = W.components
    return float(np.sum((C + C.transpose(0, 3, 2, 1)) ** 2))


def random_weyl(n: int, seed: int) -> AlgebraicWeyl:
    """Deterministic pseudo-random Weyl tensor, unit Frobenius norm."""
    if n <= 3:
        raise ValueError(f"the Weyl class is trivial for n = {n}; need n >= 4")
    rng = np.random.default_rng(seed)
    W = project_to_weyl(rng.standard_normal((n,) * 4))
    return W.scaled(1.0 / np.linalg.norm(W.components))


def weyl_symmetry_dimension(n: int) -> int:
    """Dimension of the space of algebraic Weyl tensors on R^n."""
    return n * (n + 1) * (n + 2) * (n - 3) // 12


# quadratic fields

def quadratic_field(W: AlgebraicWeyl, x) -> np.ndarray:
    """H_ik(x) = W_ipkq x_p x_q, vectorised over leading axes of x."""
    x = np.asarray(x, dtype=float)
    return np.einsum("ipkq,...p,...q->...ik", W.components, x, x)


def barred_field(W: AlgebraicWeyl, x) -> np.ndarray:
    """(1 - |x|^2) H(x)."""
    x = np.asarray(x, dtype=float)
    return (1.0 - np.sum(x * x, axis=-1))[..., None, None] * quadratic_field(W, x)


def derivative_tensor(W: AlgebraicWeyl) -> np.ndarray:
    """B with d_l H_ik(x) = B_ilkq x_q."""
    C = W.components
    return C + np.einsum("iqkl->ilkq", C)


# smooth cutoffs

def _psi(t):
    t = np.asarray(t, dtype=float)
    pos = t > 0
    return np.where(pos, np.exp(-1.0 / np.where(pos, t, 1.0)), 0.0)


def smooth_step(t):
    """C-infinity step: 0 for t <= 0, 1 for t >= 1."""
    a, b = _psi(t), _psi(1.0 - np.asarray(t, dtype=float))
    return a / (a + b)


def cutoff(t):
    """eta(t) = 1 for t <= 1, 0 for t >= 2, smooth in between."""
    return 1.0 - smooth_step(np.asarray(t, dtype=float) - 1.0)


@dataclass(frozen=True)
class PerturbationSpec:
    """Parameters of a perturbation field h.

    ``mode="single"``: h = mu (lam^2 - |x|^2) H(x) on |x| <= rho, blended
    smoothly to zero by |x| = 1.  ``lam = 0`` gives the limiting field
    -mu |x|^2 H(x), whose curvature vanishes to second order at the origin.

    ``mode="sequence"``: sum over N >= n0 of
    eta(4N^2 |x - y_N|) 2^{-N} (2^{-N} - |x - y_N|^2) H(x - y_N),
    y_N = (1/N, 0, ..., 0).
    """

    mode: str = "single"
    mu: float = 1.0
    lam: float = 0.5
    rho: float = 0.5
    n0: int = 2

    def __post_init__(self):
        if self.mode == "single":
            if not 0 < self.mu <= 1:
                raise ValueError(f"need 0 < mu <= 1, got mu = {self.mu}")
            if not 0 <= self.lam <= self.rho <= 1:
                raise ValueError(f"need 0 <= lam <= rho <= 1, got lam = {self.lam}, rho = {self.rho}")
            if self.rho <= 0:
                raise ValueError("rho must be positive")
        elif self.mode == "sequence":
            if int(self.n0) != self.n0 or self.n0 < 2:
                raise ValueError(f"need integer n0 >= 2, got {self.n0}")
        else:
            raise ValueError(f"unknown perturbation mode {self.mode!r}")

    def sequence_terms(self) -> range:
        # 2^-N below machine precision relative to the leading term
        return range(int(self.n0), 64)


def h_field(spec: PerturbationSpec, W: AlgebraicWeyl) -> Callable[[np.ndarray], np.ndarray]:
    """Return x -> h(x) (vectorised over leading axes)."""
    n = W.n

    def single(x):
        x = np.asarray(x, dtype=float)
        r = np.sqrt(np.sum(x * x, axis=-1))
        core = spec.mu * (spec.lam ** 2 - r ** 2)
        if spec.rho < 1:
            blend = cutoff(1.0 + (r - spec.rho) / (1.0 - spec.rho))
        else:
            blend = (r < 1.0).astype(float)
        return (core * blend)[..., None, None] * quadratic_field(W, x)

    def sequence(x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1] + (n, n))
        for N in spec.sequence_terms():
            y = np.zeros(n)
            y[0] = 1.0 / N
            d = x - y
            rr = np.sum(d * d, axis=-1)
            eta = cutoff(4.0 * N * N * np.sqrt(rr))
            if not np.any(eta):
                continue
            out += (eta * 2.0 ** -N * (2.0 ** -N - rr))[..., None, None] * quadratic_field(W, d)
        return out

    return single if spec.mode == "single" else sequence


def metric_exp(h) -> np.ndarray:
    """g = exp(h) for symmetric h (vectorised over leading axes)."""
    h = np.asarray(h, dtype=float)
    if h.ndim == 2:
        return expm(0.5 * (h + h.T))
    hs = 0.5 * (h + np.swapaxes(h, -1, -2))
    lam, Q = np.linalg.eigh(hs)
    return np.einsum("...ij,...j,...kj->...ik", Q, np.exp(lam), Q)


def perturbed_metric(spec: PerturbationSpec, W: AlgebraicWeyl) -> Callable:
    hf = h_field(spec, W)
    return lambda X: metric_exp(hf(X))


def size_diagnostic(spec: PerturbationSpec, W: AlgebraicWeyl, samples: int = 2000,
                    step: float = 1e-4, seed: int = 0) -> float:
    """Sampled estimate of sup(|h| + |dh| + |d^2 h|) over the unit ball."""
    n = W.n
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((samples, n))
    x *= (rng.random(samples) ** (1.0 / n) / np.linalg.norm(x, axis=1))[:, None]
    hf = h_field(spec, W)
    h0 = hf(x)
    d1 = np.zeros(samples)
    d2 = np.zeros(samples)
    for a in range(n):
        e = np.zeros(n)
        e[a] = step
        hp, hm = hf(x + e), hf(x - e)
        d1 += np.sum(((hp - hm) / (2 * step)) ** 2, axis=(1, 2))
        d2 += np.sum(((hp - 2 * h0 + hm) / step ** 2) ** 2, axis=(1, 2))
    val = np.linalg.norm(h0, axis=(1, 2)) + np.sqrt(d1) + np.sqrt(d2)
    return float(val.max())


# finite-difference curvature

@dataclass
class CurvatureJet:
    """Curvature of a metric at a point; tensors have all indices lowered."""

    scalar: float
    ricci: np.ndarray
    riemann: np.ndarray
    weyl: np.ndarray
    nabla_weyl: np.ndarray
    nabla2_weyl: np.ndarray
    metric: np.ndarray

    def norms(self) -> dict:
        return {"weyl": float(np.linalg.norm(self.weyl)),
                "nabla_weyl": float(np.linalg.norm(self.nabla_weyl)),
                "nabla2_weyl": float(np.linalg.norm(self.nabla2_weyl))}


def _stencil(n: int, h: float) -> tuple[np.ndarray, list]:
    """Offsets of the second-order stencil for value, gradient and Hessian."""
    offs = [np.zeros(n)]
    for a in range(n):
        for s in (1, -1):
            e = np.zeros(n)
            e[a] = s * h
            offs.append(e)
    pairs = []
    for a, b in itertools.combinations(range(n), 2):
        idx = []
        for sa, sb in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
            e = np.zeros(n)
            e[a], e[b] = sa * h, sb * h
            idx.append(len(offs))
            offs.append(e)
        pairs.append((a, b, idx))
    return np.array(offs), pairs


def _fd_jet(F: np.ndarray, n: int, h: float, pairs: list):
    """Value, gradient and Hessian from samples F on the stencil (leading axis)."""
    f0 = F[0]
    grad = np.empty((n,) + f0.shape)
    hess = np.empty((n, n) + f0.shape)
    for a in range(n):
        fp, fm = F[1 + 2 * a], F[2 + 2 * a]
        grad[a] = (fp - fm) / (2 * h)
        hess[a, a] = (fp - 2 * f0 + fm) / h ** 2
    for a, b, (pp, pm, mp, mm) in pairs:
        hess[a, b] = hess[b, a] = (F[pp] - F[pm] - F[mp] + F[mm]) / (4 * h * h)
    return f0, grad, hess


def _riemann(g, dg, ddg):
    """Lowered Riemann tensor, Christoffel symbols from metric jets.

    dg[c, i, j] = d_c g_ij; ddg[c, d, i, j] = d_c d_d g_ij.  Leading batch
    axes are not used here; arrays are for a single point.
    """
    ginv = np.linalg.inv(g)
    # Gamma_{k,ij} (first kind) and Gamma^k_ij
    G1 = 0.5 * (np.einsum("ijk->kij", dg) + np.einsum("jik->kij", dg) - dg)
    G1 = np.einsum("kij->kij", G1)
    G2 = np.einsum("kl,lij->kij", ginv, G1)
    # R_ijkl = 1/2(g_il,jk + g_jk,il - g_ik,jl - g_jl,ik) + g_np(G^n_jk G^p_il - G^n_jl G^p_ik)
    R = 0.5 * (np.einsum("jkil->ijkl", ddg) + np.einsum("iljk->ijkl", ddg)
               - np.einsum("jlik->ijkl", ddg) - np.einsum("ikjl->ijkl", ddg))
    R += np.einsum("np,njk,pil->ijkl", g, G2, G2) - np.einsum("np,njl,pik->ijkl", g, G2, G2)
    return R, G2, ginv


def _weyl_from_riemann(R, g, ginv):
    n = g.shape[0]
    ric = np.einsum("ik,ijkl->jl", ginv, R)
    scal = float(np.einsum("jl,jl->", ginv, ric))
    P = (ric - scal / (2.0 * (n - 1)) * g) / (n - 2)
    return R - kulkarni_nomizu(P, g), ric, scal


def _covariant_correction(Gamma, T, a_axis_first=True):
    """sum over slots s of Gamma^p_{a i_s} T_{..p..}; result has a leading index a."""
    out = np.zeros((Gamma.shape[1],) + T.shape)
    letters = "ijklmnop"[: T.ndim]
    for s in range(T.ndim):
        src = letters[:s] + "z" + letters[s + 1:]
        out += np.einsum(f"za{letters[s]},{src}->a{letters}", Gamma, T)
    return out


def _curvature_once(g_field: Callable, x0: np.ndarray, h: float) -> CurvatureJet:
    n = x0.size
    offs, pairs = _stencil(n, h)
    centres = x0[None, :] + offs
    pts = (centres[:, None, :] + offs[None, :, :]).reshape(-1, n)
    G = np.asarray(g_field(pts), dtype=float).reshape(len(offs), len(offs), n, n)
    g0 = G[0, 0]
    if not np.all(np.linalg.eigvalsh(0.5 * (g0 + g0.T)) > 0):
        raise ValueError(f"metric is not positive definite at x0 = {x0}")
    Ws, Gams = [], []
    jet0 = None
    for c in range(len(offs)):
        g, dg, ddg = _fd_jet(G[c], n, h, pairs)
        R, Gam, ginv = _riemann(g, dg, ddg)
        Wc, ric, scal = _weyl_from_riemann(R, g, ginv)
        Ws.append(Wc)
        Gams.append(Gam)
        if c == 0:
            jet0 = (g, R, ric, scal, ginv)
    Ws, Gams = np.array(Ws), np.array(Gams)
    W0, dW, ddW = _fd_jet(Ws, n, h, pairs)
    Gam0, dGam, _ = _fd_jet(Gams, n, h, pairs)
    # nabla_a W_ijkl
    nW = dW - _covariant_correction(Gam0, W0)
    # d_b(nabla_a W) = d_b d_a W - sum (d_b Gamma) W - sum Gamma d_b W
    d_nW = np.empty((n,) + nW.shape)
    for b in range(n):
        d_nW[b] = ddW[b] - _covariant_correction(dGam[b], W0) - _covariant_correction(Gam0, dW[b])
    # nabla_b nabla_a W: correct all five slots of nabla W
    nnW = d_nW - _covariant_correction(Gam0, nW)
    g, R, ric, scal, _ = jet0
    return CurvatureJet(scal, ric, R, W0, nW, nnW, g)


def curvature_at(g_field: Callable, x0, fd_step: float = 1e-3,
                 richardson: bool = False) -> CurvatureJet:
    """Curvature of x -> g(x) at x0 by nested centred differences.

    ``g_field`` maps an (m, n) array of points to (m, n, n) metrics.  With
    ``richardson`` the results for steps h and h/2 are combined as
    (4 A(h/2) - A(h)) / 3.
    """
    x0 = np.asarray(x0, dtype=float)
    if fd_step <= 0:
        raise ValueError("fd_step must be positive")
    J = _curvature_once(g_field, x0, fd_step)
    if not richardson:
        return J
    J2 = _curvature_once(g_field, x0, fd_step / 2)
    ext = lambda a, b: (4.0 * b - a) / 3.0
    return CurvatureJet(ext(J.scalar, J2.scalar), ext(J.ricci, J2.ricci),
                        ext(J.riemann, J2.riemann), ext(J.weyl, J2.weyl),
                        ext(J.nabla_weyl, J2.nabla_weyl),
                        ext(J.nabla2_weyl, J2.nabla2_weyl), J2.metric)


def stereographic_metric(X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n = X.shape[1]
    f = 4.0 / (1.0 + np.sum(X * X, axis=1)) ** 2
    return f[:, None, None] * np.eye(n)[None]


# serialisation

def tensor_rows(T: np.ndarray):
    """Rows (i, j, k, l, value) of a rank-4 tensor in lexicographic order."""
    n = T.shape[0]
    for idx in itertools.product(range(n), repeat=4):
        yield idx + (float(T[idx]),)


@dataclass
class OriginJetCheck:
    """Vanishing orders of the Weyl tensor at the origin of a perturbed metric."""

    norms: dict
    tol: float
    scale: float
    fd_step: float

    @property
    def weyl_vanishes(self) -> bool:
        return self.norms["weyl"] <= self.tol

    @property
    def nabla_weyl_vanishes(self) -> bool:
        return self.norms["nabla_weyl"] <= self.tol

    @property
    def margin(self) -> float:
        """|nabla^2 W| / tol."""
        return self.norms["nabla2_weyl"] / self.tol

    def passed(self, margin: float = 1e3) -> bool:
        return self.weyl_vanishes and self.nabla_weyl_vanishes and self.margin >= margin


def origin_jet_check(spec: PerturbationSpec, W: AlgebraicWeyl, fd_step: float = 1e-2) -> OriginJetCheck:
    """Richardson-extrapolated |W|, |nabla W|, |nabla^2 W| at x = 0.

    The tolerance is 10 fd_step^2 times |W| at the reference radius
    max(lam, rho/2) on the first axis; the radius lam alone degenerates for
    the limiting field lam = 0, where W vanishes at the origin.
    """
    g = perturbed_metric(spec, W)
    n = W.n
    J = curvature_at(g, np.zeros(n), fd_step, richardson=True)
    x = np.zeros(n)
    x[0] = max(spec.lam, 0.5 * spec.rho)
    scale = curvature_at(g, x, fd_step, richardson=True).norms()["weyl"]
    return OriginJetCheck(J.norms(), 10 * fd_step ** 2 * scale, scale, fd_step)
