"""Normalised Yamabe flow on the axisymmetric model manifolds.

The conformal factor evolves by

    d/dt u^N = (n+2)/4 (k Lap u - R_0 u + r(t) u^N),   N = (n+2)/(n-2),

with r(t) the mean scalar curvature of u^{4/(n-2)} g_0.  Each step is
linearly implicit in the linear part k Lap - R_0 and explicit in the r u^N
term, applied to w = u^N, and is followed by a rescaling to unit volume.

On the round sphere the steady states form a non-compact family (pullbacks
of the round metric by Moebius maps).  The grid breaks that symmetry at
O(h^2), so the raw discrete flow creeps along the family forever.  By
default the sphere flow is therefore run modulo Moebius maps: after each
step the metric is pulled back by the axial dilation that puts its volume
centre of mass at the origin.  r, E, int (R-r)^2 and sup |R-r| are
invariant under this pullback.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import chebyshev
from scipy import fft, optimize, sparse
from scipy.sparse.linalg import spsolve
from scipy.special import betainc

from .geometry import (Field, ModelManifold, conformal_coefficient, critical_power,
                       require_positive, volume_power)


class StepSizeUnderflow(RuntimeError):
    def __init__(self, state, dt):
        super().__init__(f"time step underflow (dt = {dt:.3g}) at t = {state.t:.6g}")
        self.state = state
        self.dt = dt


class NotConvergedError(RuntimeError):
    pass


@dataclass
class FlowState:
    t: float
    u: Field
    volume: float
    r: float
    energy: float
    sup_u: float
    sup_residual: float
    dissipation: float  # int (R - r)^2 dvol_g
    change: float = 0.0  # max relative change of u^N in the step that produced it

    @property
    def manifold(self) -> ModelManifold:
        return self.u.manifold


def _residual_terms(m: ModelManifold, u: np.ndarray):
    """Return (G, r, vol) with G = k Lap u - R_0 u + r u^N = -(R - r) u^N.

    r = int R dvol / Vol is evaluated from the Dirichlet form, a sum of
    positive terms; the scheme is conservative so this equals the
    Laplacian form exactly up to round-off, which is much larger there.
    """
    n = m.n
    k = conformal_coefficient(n)
    Lu = m.laplacian(u)
    vol = m.integrate(u ** volume_power(n))
    r = (k * m.dirichlet(u) + m.integrate(m.scalar_curvature * u ** 2)) / vol
    G = k * Lu - m.scalar_curvature * u + r * u ** critical_power(n)
    return G, r, vol


def make_state(m: ModelManifold, u, t: float = 0.0) -> FlowState:
    u = require_positive(m, u).copy()
    n = m.n
    N = critical_power(n)
    G, r, vol = _residual_terms(m, u)
    energy = (conformal_coefficient(n) * m.dirichlet(u)
              + m.integrate(m.scalar_curvature * u ** 2)) / vol ** ((n - 2.0) / n)
    R_minus_r = -G * u ** (-N)
    diss = m.integrate(G ** 2 * u ** (1.0 - N))
    return FlowState(float(t), Field(m, u), float(vol), float(r), float(energy),
                     float(u.max()), float(np.abs(R_minus_r).max()), float(diss))


def normalize_volume(m: ModelManifold, u) -> np.ndarray:
    u = require_positive(m, u)
    vol = m.integrate(u ** volume_power(m.n))
    return u / vol ** ((m.n - 2.0) / (2.0 * m.n))


@dataclass
class FlowConfig:
    manifold: ModelManifold
    u0: np.ndarray
    dt0: float = 1e-2
    safety: float = 0.5     # factor applied to dt on rejection
    growth: float = 1.25    # factor applied to dt after an accepted step
    dt_max: float = 0.05
    max_change: float = 0.01  # accuracy control: max relative change of w = u^N per step
    tol: float = 1e-6       # stop when sup |R - r| < tol
    t_max: float = 100.0
    sample_every: int = 1
    monotone_slack: float = 1e-14  # relative increase of r tolerated before rejecting
    balance: bool | None = None    # Moebius gauge; defaults to True on the sphere

    def __post_init__(self):
        self.u0 = np.asarray(self.u0.values if isinstance(self.u0, Field) else self.u0,
                             dtype=float)
        require_positive(self.manifold, self.u0)
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if not (self.dt0 > 0 and self.dt_max > 0 and self.t_max > 0):
            raise ValueError("dt0, dt_max and t_max must be positive")
        if not 0 < self.safety < 1:
            raise ValueError("safety factor must lie in (0, 1)")
        if not self.max_change > 0:
            raise ValueError("max_change must be positive")
        if self.growth < 1:
            raise ValueError("growth factor must be >= 1")
        if self.sample_every < 1:
            raise ValueError("sample_every must be >= 1")
        if self.balance is None:
            self.balance = self.manifold.kind == "sphere"
        elif self.balance and self.manifold.kind != "sphere":
            raise ValueError("Moebius balancing applies to the round sphere only")


BALANCE_SKIP = 1e-9  # centre-of-mass size below which re-balancing is skipped


def _dilation(theta, s: float):
    """Axial Moebius dilation y -> e^s y in stereographic coordinates; (theta', stretch)."""
    c2, s2 = np.cos(theta / 2) ** 2, np.sin(theta / 2) ** 2
    new = 2 * np.arctan(np.exp(s) * np.tan(theta / 2))
    return new, np.exp(s) / (c2 + np.exp(2 * s) * s2)


def centre_of_mass(m: ModelManifold, u) -> float:
    """Axial component of int x dvol_g / Vol_g on the sphere."""
    u = require_positive(m, u)
    dens = m.weights * u ** volume_power(m.n)
    return float(np.dot(dens, np.cos(m.nodes)) / dens.sum())


def _pullback(m: ModelManifold, coef: np.ndarray, s: float) -> np.ndarray:
    new, stretch = _dilation(m.nodes, s)
    return chebyshev.chebval(np.cos(new), coef) * stretch ** ((m.n - 2) / 2.0)


def balance_sphere(m: ModelManifold, u, tol: float = 1e-15, skip_below: float = 0.0):
    """Pull u back by the dilation that zeroes the centre of mass; returns (u, s).

    The condition is imposed on the discrete centre of mass of the pulled-back
    grid function, so a balanced input is returned unchanged.  Inputs whose
    centre of mass is already below ``skip_below`` are left alone, which keeps
    interpolation round-off out of the final approach.
    """
    u = require_positive(m, u)
    if abs(centre_of_mass(m, u)) < max(tol, skip_below):
        return u, 0.0
    # the grid is the DCT-II grid, so cosine series interpolate spectrally
    coef = fft.dct(u, type=2) / u.size
    coef[0] *= 0.5
    dens = m.weights * u ** volume_power(m.n)
    th = m.nodes

    def com_estimate(s):
        return float(np.dot(dens, np.cos(_dilation(th, -s)[0])))

    lo, hi = -1.0, 1.0
    while com_estimate(lo) * com_estimate(hi) > 0:
        lo, hi = 2 * lo, 2 * hi
        if hi > 64:
            raise RuntimeError("could not balance the centre of mass")
    s = optimize.brentq(com_estimate, lo, hi, xtol=1e-14)
    com = lambda q: centre_of_mass(m, _pullback(m, coef, q))
    # Newton with a difference slope on the exact discrete condition
    for _ in range(30):
        c = com(s)
        if abs(c) < tol:
            break
        d = 1e-6 * max(1.0, abs(s))
        slope = (com(s + d) - com(s - d)) / (2 * d)
        s -= c / slope
    return _pullback(m, coef, s), float(s)


def _try_step(state: FlowState, dt: float, slack: float, balance: bool = False,
              max_change: float = np.inf):
    m = state.manifold
    n = m.n
    N = critical_power(n)
    c1 = (n + 2) / 4.0
    k = conformal_coefficient(n)
    u = state.u.values
    G, _, _ = _residual_terms(m, u)
    w = u ** N
    D = sparse.diags(1.0 / (N * u ** (N - 1.0)))
    # the linear part k Lap - R_0 is implicit (linearised through u = w^{1/N});
    # the r u^N term is explicit
    lin = k * m.laplacian_matrix - sparse.diags(m.scalar_curvature)
    A = sparse.identity(u.size, format="csc") - dt * c1 * (lin @ D)
    dw = spsolve(A.tocsc(), dt * c1 * G)
    w_new = w + dw
    if not np.all(w_new > 0):
        return None, "positivity"
    change = float(np.max(np.abs(dw) / w))
    if change > max_change:
        return None, "accuracy"
    u_new = w_new ** (1.0 / N)
    if balance:
        u_new, _ = balance_sphere(m, u_new, skip_below=BALANCE_SKIP)
    u_new = normalize_volume(m, u_new)
    new = make_state(m, u_new, state.t + dt)
    if new.r > state.r + slack * max(abs(state.r), 1.0):
        return None, "monotonicity"
    new.change = change
    return new, "ok"


def step(state: FlowState, dt: float, safety: float = 0.5, monotone_slack: float = 1e-14,
         balance: bool = False, max_change: float = np.inf):
    """Advance by dt, shrinking it (by ``safety``) until the step is accepted.

    A step is rejected when w = u^N loses positivity, when r would increase,
    or when w changes by more than ``max_change`` relatively at some node.
    Returns (new_state, dt_used).
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    while True:
        new, _ = _try_step(state, dt, monotone_slack, balance, max_change)
        if new is not None:
            return new, dt
        dt *= safety
        if dt < 1e-14:
            raise StepSizeUnderflow(state, dt)


@dataclass
class Trajectory:
    samples: list
    final: FlowState
    status: str  # "converged", "t_max" or "truncated"
    config: FlowConfig = field(repr=False)
    history: dict = field(default_factory=dict, repr=False)  # per accepted step
    rejected: int = 0

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    def truncated(self, t_stop: float) -> "Trajectory":
        """Copy holding only the part with t <= t_stop (negative controls)."""
        keep = self.history["t"] <= t_stop
        hist = {k: v[keep] for k, v in self.history.items()}
        samples = [s for s in self.samples if s.t <= t_stop]
        return Trajectory(samples, samples[-1], "truncated", self.config, hist, self.rejected)

    def rows(self, radius: float | None = None):
        out = []
        for s in self.samples:
            conc = concentration_monitor(s, radius) if radius else float("nan")
            out.append({"t": s.t, "r": s.r, "E": s.energy, "volume": s.volume,
                        "supU": s.sup_u, "supResidual": s.sup_residual,
                        "concentration": conc})
        return out


def run(config: FlowConfig) -> Trajectory:
    m = config.manifold
    u0 = config.u0
    if config.balance:
        u0, _ = balance_sphere(m, u0)
    state = make_state(m, normalize_volume(m, u0))
    samples = [state]
    hist = {"t": [state.t], "r": [state.r], "E": [state.energy], "D": [state.dissipation],
            "vol": [state.volume]}
    dt = min(config.dt0, config.dt_max)
    rejected = 0
    count = 0
    status = "t_max"
    while True:
        if state.sup_residual < config.tol:
            status = "converged"
            break
        if state.t >= config.t_max:
            break
        trial = min(dt, config.t_max - state.t) if config.t_max - state.t > 1e-12 else dt
        new, used = step(state, trial, config.safety, config.monotone_slack, config.balance,
                         config.max_change)
        if used < trial:
            rejected += 1
        state = new
        count += 1
        for key, val in (("t", state.t), ("r", state.r), ("E", state.energy),
                         ("D", state.dissipation), ("vol", state.volume)):
            hist[key].append(val)
        if count % config.sample_every == 0:
            samples.append(state)
        grow = min(config.growth, 0.9 * config.max_change / max(new.change, 1e-300))
        dt = min(used * max(grow, 1.0), config.dt_max) if used == trial else used
    if samples[-1] is not state:
        samples.append(state)
    hist = {k: np.asarray(v) for k, v in hist.items()}
    return Trajectory(samples, state, status, config, hist, rejected)


# diagnostics

def energy_identity_check(traj: Trajectory, r_inf: float | None = None) -> float:
    """max_t |r(t) - r_inf - (n-2)/2 int_t^T D| / (r(0) - r_inf).

    D(t) = int (R - r)^2 dvol_{g(t)}; the time integral is the trapezoid rule
    over accepted steps.  Without an explicit r_inf the trajectory must have
    converged and its final r is used.
    """
    if r_inf is None:
        if not traj.converged:
            raise NotConvergedError(f"trajectory status is {traj.status!r}; "
                                    "the identity needs a converged run or an explicit r_inf")
        r_inf = traj.final.r
    h = traj.history
    n = traj.final.manifold.n
    t, r, D = h["t"], h["r"], h["D"]
    seg = 0.5 * (D[1:] + D[:-1]) * np.diff(t)
    tail = np.concatenate([np.cumsum(seg[::-1])[::-1], [0.0]])
    lhs = r - r_inf
    rhs = 0.5 * (n - 2) * tail
    scale = lhs[0]
    if abs(scale) < 1e-14 * max(abs(r_inf), 1.0):
        return float(np.abs(lhs - rhs).max())  # stationary: both sides vanish
    return float(np.abs(lhs - rhs).max() / abs(scale))


def _cap_fraction(c, n: int):
    """Fraction of S^{n-1} with x_1 >= c."""
    c = np.clip(np.asarray(c, dtype=float), -1.0, 1.0)
    half = 0.5 * betainc((n - 1) / 2.0, 0.5, 1.0 - c * c)
    return np.where(c >= 0, half, 1.0 - half)


def concentration_monitor(state, radius: float) -> float:
    """max over nodes p of int_{B_radius(p)} u^{2n/(n-2)} dvol_{g_0}."""
    if not radius > 0:
        raise ValueError("radius must be positive")
    if isinstance(state, FlowState):
        u = state.u
    else:
        u = state
    m = u.manifold
    n = m.n
    dens = m.weights * u.values ** volume_power(n)
    x = m.nodes
    if m.kind == "sphere":
        th = x[:, None]
        tp = x[None, :]
        with np.errstate(divide="ignore", invalid="ignore"):
            c = (math.cos(radius) - np.cos(th) * np.cos(tp)) / (np.sin(th) * np.sin(tp))
        frac = _cap_fraction(c, n)
    elif m.kind == "product":
        ds = np.abs(x[:, None] - x[None, :])
        ds = np.minimum(ds, m.L - ds)
        rest = radius ** 2 - ds ** 2
        ang = np.sqrt(np.clip(rest, 0.0, None))
        frac = np.where(rest > 0, np.where(ang >= np.pi, 1.0, _cap_fraction(np.cos(ang), n)), 0.0)
    else:
        raise ValueError(f"concentration monitor not available on {m.kind!r}")
    return float((dens @ frac).max())


@dataclass
class LojasiewiczFit:
    gamma: float
    slope: float
    residual: float
    samples: int
    skipped: bool = False
    reason: str = ""


def lojasiewicz_fit(traj: Trajectory, min_tail: int = 20) -> LojasiewiczFit:
    """Fit log(E - r_inf) against log int |R - r_inf|^{2n/(n+2)} dvol on the tail."""
    n = traj.final.manifold.n
    r_inf = traj.final.r
    p = 2.0 * n / (n + 2.0)
    xs, ys = [], []
    floor = 1e-10 * max(abs(r_inf), 1.0)
    for s in traj.samples:
        m = s.manifold
        u = s.u.values
        G, _, _ = _residual_terms(m, u)
        N = critical_power(n)
        R = m.scalar_curvature * u ** (1 - N) - conformal_coefficient(n) * m.laplacian(u) * u ** (-N)
        gap = s.energy - r_inf
        X = m.integrate(np.abs(R - r_inf) ** p * u ** volume_power(n))
        if gap > floor and X > 0:
            xs.append(math.log(X))
            ys.append(math.log(gap))
    if len(xs) < 2 * min_tail:
        return LojasiewiczFit(float("nan"), float("nan"), float("nan"), len(xs), True,
                              "degenerate tail: too few samples above round-off")
    xs, ys = np.array(xs[len(xs) // 2:]), np.array(ys[len(ys) // 2:])
    A = np.vstack([xs, np.ones_like(xs)]).T
    coef, res, *_ = np.linalg.lstsq(A, ys, rcond=None)
    slope = float(coef[0])
    resid = float(np.sqrt(res[0] / xs.size)) if res.size else 0.0
    return LojasiewiczFit(slope * p - 1.0, slope, resid, int(xs.size))


def star_normalization(u, r_inf: float, n: int) -> np.ndarray:
    """Rescale a unit-volume limit with mean curvature r_inf to solve the c = 4n(n-1) equation."""
    N = critical_power(n)
    s = (r_inf / (4.0 * n * (n - 1))) ** (1.0 / (N - 1.0))
    vals = u.values if isinstance(u, Field) else np.asarray(u, dtype=float)
    return s * vals
