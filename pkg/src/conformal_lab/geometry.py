"""Model manifolds with a one-dimensional symmetric reduction.

Three variants are provided:

* ``RoundSphere(n, N)``: axisymmetric functions of the polar angle on the
  unit sphere S^n.
* ``ProductSL(n, L, N)``: functions of the circle coordinate on
  S^{n-1}(1) x S^1(L).
* ``ConformallyFlatBall(n, phi, radius, N)``: radial functions on a ball
  with metric exp(2 phi(r)) delta.

Sphere and ball use a cell-centred conservative discretisation: nodes sit
at cell midpoints, the quadrature weight of a node is the exact volume of
its cell and the Laplacian is a flux difference across cell faces.  On the
closed manifolds this makes the discrete Laplacian self-adjoint for the
quadrature, so that -sum w u Lap(u) is exactly the discrete Dirichlet
energy.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import sparse
from scipy.special import gamma

_GL_X, _GL_W = np.polynomial.legendre.leggauss(8)


# geometric constants

def sphere_volume(n: int) -> float:
    """Volume of the unit n-sphere S^n in R^{n+1}."""
    return 2.0 * np.pi ** ((n + 1) / 2) / gamma((n + 1) / 2)


def sphere_area(n: int) -> float:
    """Area |S^{n-1}| of the unit sphere in R^n."""
    return 2.0 * np.pi ** (n / 2) / gamma(n / 2)


def yamabe_sphere(n: int) -> float:
    """Yamabe constant Y(S^n) = n(n-1) Vol(S^n)^{2/n}."""
    return n * (n - 1) * sphere_volume(n) ** (2.0 / n)


def conformal_coefficient(n: int) -> float:
    """The coefficient 4(n-1)/(n-2) of the conformal Laplacian."""
    return 4.0 * (n - 1) / (n - 2)


def critical_power(n: int) -> float:
    """(n+2)/(n-2)."""
    return (n + 2.0) / (n - 2.0)


def volume_power(n: int) -> float:
    """2n/(n-2), the exponent of the volume density u^{2n/(n-2)}."""
    return 2.0 * n / (n - 2.0)


class PositivityError(ValueError):
    """Raised when an operation needing u > 0 receives a non-positive field."""

    def __init__(self, index: int, coordinate: float, value: float):
        self.index = index
        self.coordinate = coordinate
        self.value = value
        super().__init__(
            f"conformal factor must be positive: u[{index}] = {value:.6g} "
            f"at coordinate {coordinate:.6g}"
        )


# conformal exponents for the ball

@dataclass(frozen=True)
class ConformalExponent:
    """Radial exponent phi(r) of a conformally flat metric exp(2 phi) delta.

    ``value``, ``d1`` and ``d2`` return phi, phi' and phi'' as functions of r.
    """

    value: Callable[[np.ndarray], np.ndarray]
    d1: Callable[[np.ndarray], np.ndarray]
    d2: Callable[[np.ndarray], np.ndarray]
    name: str = "custom"

    @classmethod
    def flat(cls) -> "ConformalExponent":
        zero = lambda r: np.zeros_like(np.asarray(r, dtype=float))
        return cls(zero, zero, zero, "flat")

    @classmethod
    def stereographic(cls) -> "ConformalExponent":
        """phi = log(2/(1+r^2)): the round unit sphere in stereographic chart."""
        return cls(
            lambda r: np.log(2.0 / (1.0 + np.asarray(r) ** 2)),
            lambda r: -2.0 * np.asarray(r) / (1.0 + np.asarray(r) ** 2),
            lambda r: -2.0 * (1.0 - np.asarray(r) ** 2) / (1.0 + np.asarray(r) ** 2) ** 2,
            "stereographic",
        )

    def scalar_curvature(self, n: int, r) -> np.ndarray:
        """R = -exp(-2 phi)(2(n-1) Lap phi + (n-1)(n-2)|grad phi|^2)."""
        r = np.asarray(r, dtype=float)
        p1, p2 = self.d1(r), self.d2(r)
        with np.errstate(divide="ignore", invalid="ignore"):
            lap = p2 + (n - 1) * np.where(r > 0, p1 / np.where(r > 0, r, 1.0), p2)
        return -np.exp(-2.0 * self.value(r)) * (2 * (n - 1) * lap + (n - 1) * (n - 2) * p1 ** 2)


# manifolds

class ModelManifold:
    """Base class: nodes, quadrature weights, Laplacian and background R_g."""

    kind = "abstract"

    def __init__(self, n: int, grid_size: int):
        if int(n) != n or n < 3:
            raise ValueError(f"dimension n must be an integer >= 3, got {n}")
        if grid_size < 8:
            raise ValueError(f"grid too coarse: {grid_size} nodes (need >= 8)")
        self.n = int(n)
        self.grid_size = int(grid_size)

    # subclasses set: nodes, weights, scalar_curvature, h, _lap (sparse)

    @property
    def laplacian_matrix(self) -> sparse.csr_matrix:
        return self._lap

    def laplacian(self, u) -> np.ndarray:
        return self._lap @ field_values(u)

    def dirichlet(self, u) -> np.ndarray:
        """Discrete Dirichlet integral of |du|^2."""
        raise NotImplementedError

    def derivative(self, u) -> np.ndarray:
        """Second-order nodal derivative along the reduced coordinate."""
        return np.gradient(field_values(u), self.h, edge_order=2)

    def total_volume(self) -> float:
        return float(self.weights.sum())

    def integrate(self, f) -> float:
        return float(np.dot(self.weights, field_values(f)))

    def describe(self) -> dict:
        return {"kind": self.kind, "n": self.n, "grid_size": self.grid_size}

    def __repr__(self) -> str:
        args = ", ".join(f"{k}={v}" for k, v in self.describe().items() if k != "kind")
        return f"{type(self).__name__}({args})"


def _cell_integrals(edges: np.ndarray, density: Callable) -> np.ndarray:
    a, b = edges[:-1, None], edges[1:, None]
    x = 0.5 * (a + b) + 0.5 * (b - a) * _GL_X[None, :]
    return 0.5 * (b - a)[:, 0] * (density(x) @ _GL_W)


def _flux_matrix(weights: np.ndarray, faces: np.ndarray, h: float) -> sparse.csr_matrix:
    """Tridiagonal flux-difference Laplacian with zero flux through end faces."""
    upper = faces[1:-1] / h
    main = -(faces[:-1] + faces[1:]) / h
    K = sparse.diags([upper, main, upper], [-1, 0, 1], format="csr")
    return sparse.diags(1.0 / weights) @ K


class RoundSphere(ModelManifold):
    """Unit S^n, functions of the polar angle theta."""

    kind = "sphere"

    def __init__(self, n: int, grid_size: int = 400):
        super().__init__(n, grid_size)
        N = self.grid_size
        self.h = np.pi / N
        edges = np.linspace(0.0, np.pi, N + 1)
        self.edges = edges
        self.nodes = 0.5 * (edges[:-1] + edges[1:])
        area = sphere_area(n)
        self.weights = area * _cell_integrals(edges, lambda t: np.sin(t) ** (n - 1))
        self._faces = area * np.sin(edges) ** (n - 1)
        self._faces[[0, -1]] = 0.0
        self._lap = _flux_matrix(self.weights, self._faces, self.h)
        self.scalar_curvature = np.full(N, float(n * (n - 1)))

    def dirichlet(self, u) -> float:
        u = field_values(u)
        return float(np.sum(self._faces[1:-1] * np.diff(u) ** 2) / self.h)

    def exact_volume(self) -> float:
        return sphere_volume(self.n)


class ProductSL(ModelManifold):
    """S^{n-1}(1) x S^1(L), functions of the periodic coordinate s."""

    kind = "product"

    def __init__(self, n: int, L: float, grid_size: int = 256):
        super().__init__(n, grid_size)
        if not L > 0:
            raise ValueError(f"circle length L must be positive, got {L}")
        N = self.grid_size
        self.L = float(L)
        self.h = self.L / N
        self.nodes = np.arange(N) * self.h
        area = sphere_area(n)
        self.weights = np.full(N, area * self.h)
        self._face = area
        off = np.ones(N - 1)
        K = sparse.diags([off, -2.0 * np.ones(N), off], [-1, 0, 1], format="lil")
        K[0, N - 1] = 1.0
        K[N - 1, 0] = 1.0
        self._lap = (K.tocsr() / self.h ** 2)
        self.scalar_curvature = np.full(N, float((n - 1) * (n - 2)))

    def dirichlet(self, u) -> float:
        u = field_values(u)
        du = np.roll(u, -1) - u
        return float(self._face * np.sum(du ** 2) / self.h)

    def derivative(self, u) -> np.ndarray:
        u = field_values(u)
        return (np.roll(u, -1) - np.roll(u, 1)) / (2 * self.h)

    def exact_volume(self) -> float:
        return self.L * sphere_area(self.n)

    def describe(self) -> dict:
        return {"kind": self.kind, "n": self.n, "L": self.L, "grid_size": self.grid_size}


class ConformallyFlatBall(ModelManifold):
    """Ball |x| <= radius in R^n with metric exp(2 phi(|x|)) delta; radial functions."""

    kind = "ball"

    def __init__(self, n: int, phi: ConformalExponent | None = None,
                 radius: float = 1.0, grid_size: int = 400):
        super().__init__(n, grid_size)
        if not radius > 0:
            raise ValueError(f"radius must be positive, got {radius}")
        self.phi = phi if phi is not None else ConformalExponent.flat()
        self.radius = float(radius)
        N = self.grid_size
        self.h = self.radius / N
        edges = np.linspace(0.0, self.radius, N + 1)
        self.edges = edges
        self.nodes = 0.5 * (edges[:-1] + edges[1:])
        area = sphere_area(n)
        ph = self.phi
        self.weights = area * _cell_integrals(
            edges, lambda r: r ** (n - 1) * np.exp(n * ph.value(r)))
        self._faces = area * edges ** (n - 1) * np.exp((n - 2) * ph.value(edges))
        self._faces[0] = 0.0
        K = _flux_matrix(np.ones(N), self._faces, self.h).tolil()
        # outer face: centred difference against a ghost node extrapolated by a
        # cubic, so its truncation error matches the interior faces
        x = self.nodes[-4:] - (self.radius + 0.5 * self.h)
        d = _lagrange_value_weights(x) / self.h
        d[-1] -= 1.0 / self.h
        K[N - 1, N - 1] += self._faces[-1] / self.h  # drop the zero-value closure
        for k in range(4):
            K[N - 1, N - 4 + k] += self._faces[-1] * d[k]
        self._lap = sparse.diags(1.0 / self.weights) @ K.tocsr()
        self.scalar_curvature = self.phi.scalar_curvature(n, self.nodes)

    def dirichlet(self, u) -> float:
        u = field_values(u)
        return float(np.sum(self._faces[1:-1] * np.diff(u) ** 2) / self.h)

    def describe(self) -> dict:
        return {"kind": self.kind, "n": self.n, "phi": self.phi.name,
                "radius": self.radius, "grid_size": self.grid_size}


def _lagrange_value_weights(x: np.ndarray) -> np.ndarray:
    """Weights c_k with p(0) = sum c_k f(x_k) for the interpolant through x."""
    V = np.vander(x, len(x), increasing=True).T
    rhs = np.zeros(len(x))
    rhs[0] = 1.0
    return np.linalg.solve(V, rhs)


@dataclass
class Field:
    """Values of a function at the nodes of a manifold grid."""

    manifold: ModelManifold
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.manifold.grid_size,):
            raise ValueError(
                f"field has {self.values.shape} values, grid has {self.manifold.grid_size} nodes")

    @property
    def nodes(self) -> np.ndarray:
        return self.manifold.nodes

    def is_positive(self) -> bool:
        return bool(np.all(self.values > 0))


def field_values(u) -> np.ndarray:
    return u.values if isinstance(u, Field) else np.asarray(u, dtype=float)


def require_positive(m: ModelManifold, u) -> np.ndarray:
    u = field_values(u)
    bad = np.flatnonzero(~(u > 0))
    if bad.size:
        i = int(bad[0])
        raise PositivityError(i, float(m.nodes[i]), float(u[i]))
    return u


# conformal calculus

def laplace_beltrami(m: ModelManifold, u) -> np.ndarray:
    return m.laplacian(u)


def conformal_scalar_curvature(m: ModelManifold, u) -> np.ndarray:
    """Scalar curvature of u^{4/(n-2)} g from R u^{(n+2)/(n-2)} = R_g u - k Lap u."""
    u = require_positive(m, u)
    n = m.n
    return (m.scalar_curvature * u - conformal_coefficient(n) * m.laplacian(u)) \
        * u ** (-critical_power(n))


def volume(m: ModelManifold, u) -> float:
    u = require_positive(m, u)
    return m.integrate(u ** volume_power(m.n))


def mean_scalar_curvature(m: ModelManifold, u) -> float:
    """r = int R_{u} dvol_{u} / Vol_{u}, using the curvature field of u."""
    u = require_positive(m, u)
    R = conformal_scalar_curvature(m, u)
    dens = u ** volume_power(m.n)
    return m.integrate(R * dens) / m.integrate(dens)


def mean_scalar_curvature_direct(m: ModelManifold, u) -> float:
    """Same quantity from the integrand R_g u^2 - k u Lap u."""
    u = require_positive(m, u)
    k = conformal_coefficient(m.n)
    num = m.integrate(m.scalar_curvature * u ** 2 - k * u * m.laplacian(u))
    return num / m.integrate(u ** volume_power(m.n))


def yamabe_energy(m: ModelManifold, u) -> float:
    """E(u) = (int k|du|^2 + R_g u^2) / (int u^{2n/(n-2)})^{(n-2)/n}."""
    u = require_positive(m, u)
    n = m.n
    num = conformal_coefficient(n) * m.dirichlet(u) + m.integrate(m.scalar_curvature * u ** 2)
    return num / m.integrate(u ** volume_power(n)) ** ((n - 2.0) / n)


def yamabe_constant_estimate(m: ModelManifold, seeds=None, tol: float = 1e-7,
                             t_max: float = 200.0) -> float:
    """Upper estimate of the Yamabe constant: least energy reached by the flow.

    Seeds default to the constant and a few low cosine modes.  Every seed
    energy is itself an upper bound, so the result never exceeds E(1).
    """
    from .flow import FlowConfig, run

    if seeds is None:
        x = m.nodes
        if m.kind == "product":
            modes = [np.cos(2 * np.pi * k * x / m.L) for k in (1, 2)]
        elif m.kind == "sphere":
            modes = [np.cos(x), np.cos(2 * x), np.cos(3 * x)]
        else:
            modes = [np.cos(np.pi * x / m.radius)]
        seeds = [np.ones_like(x)] + [1 + 0.2 * md for md in modes]
    best = np.inf
    for s in seeds:
        s = require_positive(m, s)
        best = min(best, yamabe_energy(m, s))
        if m.kind == "ball":
            continue
        traj = run(FlowConfig(m, s, tol=tol, t_max=t_max, sample_every=10 ** 9))
        best = min(best, traj.final.energy)
    return float(best)
