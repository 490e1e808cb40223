"""Standard bubbles and greedy bubble extraction.

The bubble u_(xi,eps)(x) = (eps / (eps^2 + |x - xi|^2))^{(n-2)/2} solves
Lap u + n(n-2) u^{(n+2)/(n-2)} = 0 on R^n.  ``extract_bubbles`` peels
bubbles off a sampled function one at a time, starting from the global
maximum, with amplitudes normalised to a prescribed energy level c.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares
from scipy.special import beta

from .geometry import (ModelManifold, RoundSphere, ConformallyFlatBall, field_values,
                       sphere_area, yamabe_sphere, conformal_coefficient, volume_power)


@dataclass(frozen=True)
class BubbleParams:
    xi: np.ndarray
    eps: float

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError(f"bubble scale must be positive, got eps = {self.eps}")
        object.__setattr__(self, "xi", np.atleast_1d(np.asarray(self.xi, dtype=float)))

    @property
    def n(self) -> int:
        return self.xi.size


def bubble_profile(n: int, eps: float, d) -> np.ndarray:
    """Bubble as a function of the distance d to its centre."""
    d = np.asarray(d, dtype=float)
    return (eps / (eps * eps + d * d)) ** ((n - 2) / 2.0)


def bubble_eval(b: BubbleParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    d2 = np.sum((x - b.xi) ** 2, axis=-1)
    return (b.eps / (b.eps ** 2 + d2)) ** ((b.n - 2) / 2.0)


def bubble_laplacian(b: BubbleParams, x) -> np.ndarray:
    """Closed-form Laplacian: -n(n-2) eps^{a+2} (eps^2 + |x-xi|^2)^{-a-2}, a = (n-2)/2."""
    n = b.n
    x = np.asarray(x, dtype=float)
    s = b.eps ** 2 + np.sum((x - b.xi) ** 2, axis=-1)
    a = (n - 2) / 2.0
    return -n * (n - 2) * b.eps ** (a + 2) * s ** (-a - 2)


def bubble_residual(b: BubbleParams, x) -> float:
    """Max |Lap u + n(n-2) u^{(n+2)/(n-2)}| over points x, exact derivatives.

    The Laplacian is assembled from the radial derivatives u' and u'' of
    the profile rather than from the simplified closed form.
    """
    n = b.n
    x = np.asarray(x, dtype=float)
    r = np.sqrt(np.sum((x - b.xi) ** 2, axis=-1))
    a = (n - 2) / 2.0
    e2 = b.eps ** 2
    s = e2 + r * r
    u = (b.eps / s) ** a
    # u' = -2a r u / s, u'' = -2a u / s + 4a(a+1) r^2 u / s^2
    du_over_r = -2 * a * u / s
    d2u = -2 * a * u / s + 4 * a * (a + 1) * r * r * u / s ** 2
    lap = d2u + (n - 1) * du_over_r
    res = lap + n * (n - 2) * u ** ((n + 2) / (n - 2))
    scale = n * (n - 2) * u ** ((n + 2) / (n - 2))
    return float(np.max(np.abs(res) / np.maximum(scale, np.finfo(float).tiny)))


def bubble_stencil_residual(n: int, eps: float, radius: float, grid_size: int) -> float:
    """Same residual with the flat-ball grid Laplacian; decays like h^2."""
    m = ConformallyFlatBall(n, radius=radius, grid_size=grid_size)
    u = bubble_profile(n, eps, m.nodes)
    return float(np.max(np.abs(m.laplacian(u) + n * (n - 2) * u ** ((n + 2) / (n - 2)))))


def bubble_flat_integrals(n: int) -> tuple[float, float]:
    """(int |grad u|^2, int u^{2n/(n-2)}) over R^n for the unit bubble."""
    area = sphere_area(n)
    grad2 = (n - 2) ** 2 * area * 0.5 * beta(n / 2 + 1, n / 2 - 1)
    vol = area * 0.5 * beta(n / 2, n / 2)
    return grad2, vol


def bubble_energy_flat(n: int, b: BubbleParams, radius: float | None = None,
                       grid_size: int = 4000) -> float:
    """Yamabe energy of a bubble over R^n.

    The integrals over the ball of the given radius about xi are computed by
    Gauss-Legendre quadrature in the variable t = r/(eps + r); the tails
    beyond the radius are added in closed form from the incomplete Beta
    function.  Radii below 100 eps are rejected.
    """
    from scipy.special import betainc

    if b.n != n:
        raise ValueError(f"bubble centre has dimension {b.n}, expected {n}")
    eps = b.eps
    if radius is None:
        radius = 100.0 * eps
    if radius < 100.0 * eps:
        raise ValueError(f"truncation radius {radius} is below 100 eps = {100 * eps}")
    area = sphere_area(n)
    a = (n - 2) / 2.0
    # substitute r = eps * rho, integrate rho in [0, radius/eps]
    R = radius / eps
    x, w = np.polynomial.legendre.leggauss(400)
    T = R / (1.0 + R)
    t = 0.5 * T * (x + 1.0)
    wt = 0.5 * T * w
    rho = t / (1.0 - t)
    jac = 1.0 / (1.0 - t) ** 2
    s = 1.0 + rho * rho
    # unit-bubble integrands; the eps-powers cancel in the quotient
    grad2 = area * np.sum(wt * jac * rho ** (n - 1) * (2 * a * rho) ** 2 * s ** (-2 * a - 2))
    vol = area * np.sum(wt * jac * rho ** (n - 1) * s ** (-n))
    # tails: int_R^inf rho^{n-1} s^{-p} drho = 1/2 B(p - n/2, n/2) * I_{1/(1+R^2)}(p - n/2, n/2)
    z = 1.0 / (1.0 + R * R)

    def tail(p, extra):
        # int_R^inf rho^{n-1+extra} (1+rho^2)^{-p}
        k = (n + extra) / 2.0
        return 0.5 * beta(p - k, k) * betainc(p - k, k, z)

    grad2 += area * (2 * a) ** 2 * tail(2 * a + 2, 2)
    vol += area * tail(n, 0)
    return conformal_coefficient(n) * grad2 / vol ** ((n - 2.0) / n)


# point clouds on flat charts

@dataclass
class FlatSamples:
    """Values of a function at scattered points of R^n."""

    points: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.points.shape[0],):
            raise ValueError("one value per sample point is required")

    @property
    def n(self) -> int:
        return self.points.shape[1]


def bubble_amplitude(n: int, c: float) -> float:
    """(4n(n-1)/c)^{(n-2)/4}."""
    if not c > 0:
        raise ValueError(f"energy level c must be positive, got {c}")
    return (4.0 * n * (n - 1) / c) ** ((n - 2) / 4.0)


def separation_matrix(bubbles) -> np.ndarray:
    """eps_i/eps_j + eps_j/eps_i + d(p_i, p_j)^2/(eps_i eps_j) for every pair."""
    m = len(bubbles)
    if m < 2:
        raise ValueError("separation needs at least two bubbles")
    S = np.zeros((m, m))
    for i, bi in enumerate(bubbles):
        for j, bj in enumerate(bubbles):
            d = bi.distance_to(bj)
            S[i, j] = bi.eps / bj.eps + bj.eps / bi.eps + d * d / (bi.eps * bj.eps)
    return S


def energy_quantization_check(E_inf: float, m: int, c: float, n: int) -> float:
    """|c - (E_inf^{n/2} + m Y(S^n)^{n/2})^{2/n}|."""
    if m < 0 or E_inf < 0:
        raise ValueError("need m >= 0 and E_inf >= 0")
    predicted = (E_inf ** (n / 2.0) + m * yamabe_sphere(n) ** (n / 2.0)) ** (2.0 / n)
    return abs(c - predicted)


@dataclass
class FoundBubble:
    """A bubble located by extraction.

    On flat charts ``centre`` is a point of R^n; on a sphere field it is the
    polar angle of the pole it sits on (0 or pi).
    """

    centre: np.ndarray
    eps: float
    amplitude: float
    chart: str = "flat"

    def distance_to(self, other: "FoundBubble") -> float:
        if self.chart == "sphere":
            return float(abs(self.centre[0] - other.centre[0]))
        return float(np.linalg.norm(self.centre - other.centre))


class BubbleExtractionError(RuntimeError):
    def __init__(self, message: str, partial: "DecompositionResult"):
        super().__init__(message)
        self.partial = partial


@dataclass
class DecompositionResult:
    m: int
    bubbles: list
    remainder: np.ndarray = field(repr=False)
    c: float
    n: int
    threshold: float
    quantization_error: float | None = None
    remainder_energy: float | None = None

    def separations(self):
        return separation_matrix(self.bubbles) if self.m >= 2 else None

    def to_json(self) -> str:
        recs = [{"p": [float(v) for v in b.centre], "eps": float(b.eps),
                 "amplitude": float(b.amplitude), "chart": b.chart} for b in self.bubbles]
        sep = self.separations()
        return json.dumps({
            "m": self.m, "n": self.n, "c": self.c, "threshold": self.threshold,
            "quantization_error": self.quantization_error,
            "remainder_energy": self.remainder_energy,
            "bubbles": recs,
            "separation": None if sep is None else sep.tolist(),
        }, indent=2, sort_keys=True)


def _distances(u, centre):
    if isinstance(u, FlatSamples):
        return np.linalg.norm(u.points - centre, axis=1)
    m = u.manifold
    if isinstance(m, RoundSphere):
        return np.abs(m.nodes - centre[0])
    return np.abs(m.nodes - centre[0])


def _chart(u) -> str:
    if isinstance(u, FlatSamples):
        return "flat"
    if isinstance(u.manifold, RoundSphere):
        return "sphere"
    if isinstance(u.manifold, ConformallyFlatBall):
        return "ball"
    raise ValueError(f"bubble extraction is not supported on {u.manifold.kind}")


def _peak_centre(u, vals, i, chart):
    if chart == "flat":
        return u.points[i].copy()
    m = u.manifold
    if chart == "sphere":
        # axisymmetric bubbles can only sit at a pole
        if m.nodes[i] < np.pi / 2:
            if i > 2:
                raise ValueError("maximum is on a latitude ring, not at a pole")
            return np.array([0.0])
        if i < m.grid_size - 3:
            raise ValueError("maximum is on a latitude ring, not at a pole")
        return np.array([np.pi])
    if i > 2:
        raise ValueError("radial maximum away from the centre is a shell, not a bubble")
    return np.array([0.0])


def default_threshold(peak: float) -> float:
    """Default stopping level: a hundredth of the first peak."""
    return 1e-2 * peak


def extract_bubbles(u, c: float, threshold: float | None = None, max_bubbles: int = 8,
                    refine: bool = True) -> DecompositionResult:
    """Greedy extraction of normalised bubbles A (eps/(eps^2+d^2))^{(n-2)/2}.

    Each round locates the global maximum p, infers eps from the peak via
    u(p) = A eps^{-(n-2)/2}, refines (p, eps) by least squares on the ball
    of radius 5 eps about p (with a constant background term) and
    subtracts the bubble.  The loop stops when the remainder maximum
    falls below the threshold.
    """
    chart = _chart(u)
    n = u.n if isinstance(u, FlatSamples) else u.manifold.n
    vals = np.array(u.values, dtype=float)
    if np.any(vals < 0):
        raise ValueError("extraction needs u >= 0")
    A = bubble_amplitude(n, c)
    a = (n - 2) / 2.0
    if threshold is None:
        threshold = default_threshold(float(vals.max()))
    found: list[FoundBubble] = []
    rem = vals
    while rem.max() > threshold:
        if len(found) == max_bubbles:
            partial = DecompositionResult(len(found), found, rem, c, n, threshold)
            raise BubbleExtractionError(
                f"remainder still above threshold after {max_bubbles} bubbles", partial)
        i = int(np.argmax(rem))
        p = _peak_centre(u, rem, i, chart)
        d0 = _distances(u, p)[i]
        # peak value at distance d0 from the centre: A (e/(e^2+d0^2))^a = rem[i]
        q = (rem[i] / A) ** (1.0 / a)
        disc = 1.0 - 4.0 * q * q * d0 * d0
        eps = (1.0 + np.sqrt(max(disc, 0.0))) / (2.0 * q)
        if refine:
            p, eps = _refine(u, rem, p, eps, A, n, chart)
        bub = A * bubble_profile(n, eps, _distances(u, p))
        found.append(FoundBubble(p, float(eps), float(A), chart))
        rem = rem - bub
    res = DecompositionResult(len(found), found, rem, float(c), n, float(threshold))
    if chart != "flat" and np.all(rem > 0):
        from .geometry import yamabe_energy
        res.remainder_energy = yamabe_energy(u.manifold, rem)
    res.quantization_error = energy_quantization_check(
        res.remainder_energy or 0.0, res.m, c, n)
    return res


def _refine(u, rem, p, eps, A, n, chart):
    # the fit carries a constant offset for the slowly varying background
    # (smooth part plus tails of other bubbles) over the fitting ball
    d = _distances(u, p)
    mask = d <= 5 * eps
    if mask.sum() < 5:
        return p, eps
    target = rem[mask]
    scale = target.max()
    b0 = float(target.min()) * 0.5
    if chart == "flat":
        pts = u.points[mask]

        def resid(z):
            q, e, b = z[:-2], np.exp(z[-2]), z[-1]
            dd = np.linalg.norm(pts - q, axis=1)
            return (A * bubble_profile(n, e, dd) + b - target) / scale

        z0 = np.concatenate([p, [np.log(eps), b0]])
        sol = least_squares(resid, z0, xtol=1e-14, ftol=1e-14, gtol=1e-14)
        return sol.x[:-2], float(np.exp(sol.x[-2]))
    dd = d[mask]

    def resid(z):
        return (A * bubble_profile(n, np.exp(z[0]), dd) + z[1] - target) / scale

    sol = least_squares(resid, [np.log(eps), b0], xtol=1e-14, ftol=1e-14, gtol=1e-14)
    return p, float(np.exp(sol.x[0]))


def plant_bubbles(m_or_points, n: int, c: float, centres, scales, smooth=None):
    """Sum of normalised bubbles (plus an optional smooth part) on a grid or cloud.

    For a RoundSphere the centres are polar angles (0 or pi) and distances
    are geodesic; for a ball they are radii (0 only); otherwise
    ``m_or_points`` is an (m, n) array of flat sample points.
    """
    A = bubble_amplitude(n, c)
    if isinstance(m_or_points, ModelManifold):
        x = m_or_points.nodes
        total = np.zeros_like(x)
        for p, e in zip(centres, scales):
            total += A * bubble_profile(n, e, np.abs(x - p))
    else:
        pts = np.asarray(m_or_points, dtype=float)
        total = np.zeros(pts.shape[0])
        for p, e in zip(centres, scales):
            total += A * bubble_profile(n, e, np.linalg.norm(pts - np.asarray(p), axis=1))
    if smooth is not None:
        total = total + smooth
    return total
