"""Command-line front end: ``conformal-lab <command> [options]``.

Every command reads its parameters from built-in defaults, then an optional
JSON config file (``--config``), then command-line flags, in increasing
priority.  Outputs go to ``<out>/<command>-<hash>/`` where ``out`` is
``--out``, else ``$CONFORMAL_LAB_OUT``, else ``./conformal_lab_out`` and the
hash is taken over the merged configuration.  Each run writes CSV tables, a
``summary.json`` with named checks, a ``manifest.json`` and, with
``--plot``, SVG figures.  The exit status is 0 iff every check passes, 1 if a
check fails, 2 for invalid configuration and 3 if a computation fails.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import platform
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .io import config_hash, write_csv, write_json, write_svg

MANIFEST_SCHEMA = 1
DEFAULT_OUT = "conformal_lab_out"


class ConfigError(ValueError):
    """Invalid configuration; the message names the violated precondition."""


# parameter schema: name -> (type, default, help)
_COMMON = {
    "seed": (int, 0, "random seed"),
    "plot": (bool, False, "write SVG figures"),
}

SCHEMA = {
    "flow": {
        "manifold": (str, "sphere", "sphere or product"),
        "n": (int, 3, "dimension"),
        "grid": (int, 400, "grid cells"),
        "L": (float, None, "circle length for the product manifold"),
        "amplitude": (float, 0.3, "initial data 1 + amplitude cos(mode x)"),
        "mode": (int, 1, "mode of the initial perturbation"),
        "dt": (float, 0.01, "initial time step"),
        "dt_max": (float, 0.05, "largest time step"),
        "max_change": (float, 0.01, "largest relative change of u^N per step"),
        "tol": (float, 1e-6, "stop when sup|R - r| < tol"),
        "t_max": (float, 100.0, "final time"),
        "radius": (float, 0.1, "geodesic radius of the concentration monitor"),
    },
    "continue": {
        "n": (int, 4, "dimension of S^{n-1} x S^1(L)"),
        "L": (float, None, "circle length (default 0.8 L1 for L sweeps, 1.5 L1 otherwise)"),
        "delta0": (float, 0.0, "subcritical offset delta at the start"),
        "parameter": (str, "L", "continuation parameter: L or delta"),
        "target": (float, None, "end value (default 1.5 L1, or 0 for delta)"),
        "ds": (float, 0.05, "initial arclength step"),
        "grid": (int, 256, "grid cells (even)"),
        "switch": (bool, False, "follow the first bifurcating branch"),
        "enumerate": (bool, False, "enumerate solutions and check the Morse inequalities"),
        "start_amplitude": (float, 0.3, "cos seed amplitude for delta sweeps"),
    },
    "reduced-energy": {
        "n": (int, 52, "dimension (>= 11)"),
        "eps": (list, [round(0.2 * k, 10) for k in range(1, 11)], "scales epsilon"),
        "workers": (int, 1, "worker threads for the epsilon sweep"),
        "rtol": (float, 1e-6, "relative agreement required between closed form and quadrature"),
    },
    "pohozaev": {
        "case": (str, "classical", "classical, dilation, translation, stereographic or non-solution"),
        "n": (int, 3, "dimension (3..7)"),
        "levels": (int, 3, "refinement levels"),
        "base_grid": (int, 32, "radial intervals on the coarsest level"),
        "delta": (float, 0.0, "subcritical offset"),
    },
    "bubbles": {
        "n": (int, 4, "dimension"),
        "grid": (int, 4000, "sphere grid cells"),
        "poles": (list, ["north"], "planted bubble positions (north or south)"),
        "scales": (list, [0.02], "planted bubble scales"),
        "threshold": (float, None, "extraction threshold (default 1% of the peak)"),
        "points": (int, 10000, "random points for the analytic residual"),
    },
    "weyl": {
        "n": (int, 10, "dimension (>= 4)"),
        "scan_critical_dimension": (bool, False, "scan n for a critical scale"),
        "scan_min": (int, 11, "first dimension of the scan"),
        "scan_max": (int, 80, "last dimension of the scan"),
        "jet": (bool, False, "curvature jet of the perturbed metric at the origin"),
        "mu": (float, 1.0, "perturbation amplitude"),
        "lam": (float, 0.0, "perturbation parameter lambda"),
        "rho": (float, 0.5, "core radius"),
        "fd_step": (float, 1e-2, "finite-difference step"),
        "tensor": (bool, False, "write the tensor as (i,j,k,l,value) CSV"),
    },
}

COMMANDS = tuple(SCHEMA)


def _schema(command: str) -> dict:
    return {**_COMMON, **SCHEMA[command]}


@dataclass
class ExperimentConfig:
    command: str
    params: dict
    out_root: Path
    config_file: str | None = None

    @property
    def hash(self) -> str:
        return config_hash({"command": self.command, **self.params})

    @property
    def out_dir(self) -> Path:
        return self.out_root / f"{self.command}-{self.hash[:12]}"


# parsing

def _coerce(name: str, typ, value):
    if value is None:
        return None
    try:
        if typ is bool:
            if isinstance(value, bool):
                return value
            raise TypeError
        if typ is int:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise TypeError
            return int(value)
        if typ is float:
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if typ is list:
            if not isinstance(value, (list, tuple)):
                raise TypeError
            return list(value)
        if typ is str:
            if not isinstance(value, str):
                raise TypeError
            return value
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: expected {typ.__name__}, got {value!r}") from None
    return value


def _list_arg(text: str):
    out = []
    for item in text.split(","):
        item = item.strip()
        try:
            out.append(float(item))
        except ValueError:
            out.append(item)
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="conformal-lab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for cmd in COMMANDS:
        sp = sub.add_parser(cmd, help=f"{cmd} experiment")
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--out", help="output root (overrides $CONFORMAL_LAB_OUT)")
        for name, (typ, default, text) in _schema(cmd).items():
            flag = "--" + name.replace("_", "-")
            text = f"{text} (default {default})".replace("%", "%%")
            if typ is bool:
                sp.add_argument(flag, dest=name, action=argparse.BooleanOptionalAction,
                                default=None, help=text)
            elif typ is list:
                sp.add_argument(flag, dest=name, type=_list_arg, default=None,
                                help=text + "; comma separated")
            else:
                sp.add_argument(flag, dest=name, type=typ, default=None, help=text)
    return p


def parse_and_validate(argv=None) -> ExperimentConfig:
    """Merge defaults, config file and flags; check every precondition eagerly."""
    args = build_parser().parse_args(argv)
    cmd = args.command
    schema = _schema(cmd)
    params = {k: v[1] for k, v in schema.items()}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file {args.config}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        if data.get("command", cmd) != cmd:
            raise ConfigError(f"config file is for command {data['command']!r}, not {cmd!r}")
        data.pop("command", None)
        unknown = sorted(set(data) - set(schema))
        if unknown:
            raise ConfigError(f"unknown config key(s) for {cmd}: {', '.join(unknown)}")
        for k, v in data.items():
            params[k] = _coerce(k, schema[k][0], v)
    for k in schema:
        v = getattr(args, k)
        if v is not None:
            params[k] = v
    _validate(cmd, params)
    root = args.out or os.environ.get("CONFORMAL_LAB_OUT") or DEFAULT_OUT
    return ExperimentConfig(cmd, params, Path(root), args.config)


def _require(cond: bool, message: str):
    if not cond:
        raise ConfigError(message)


def first_bifurcation_length(n: int) -> float:
    """L1 = 2 pi / sqrt(n - 2) for the constant solution on S^{n-1} x S^1(L)."""
    return 2 * math.pi / math.sqrt(n - 2)


def _validate(cmd: str, p: dict):
    n = p.get("n")
    if cmd == "flow":
        _require(p["manifold"] in ("sphere", "product"),
                 f"manifold must be 'sphere' or 'product', got {p['manifold']!r}")
        _require(3 <= n <= 5, f"flow needs 3 <= n <= 5, got n = {n}")
        _require(p["grid"] >= 16, "grid must be >= 16")
        _require(0 <= p["amplitude"] < 1, "amplitude must lie in [0, 1) so that u0 > 0")
        _require(p["mode"] >= 1, "mode must be >= 1")
        for k in ("dt", "dt_max", "max_change", "tol", "t_max", "radius"):
            _require(p[k] > 0, f"{k} must be positive")
        if p["manifold"] == "product":
            if p["L"] is None:
                p["L"] = 0.8 * first_bifurcation_length(n)
            _require(p["L"] > 0, "L must be positive")
    elif cmd == "continue":
        _require(n >= 3, f"n must be >= 3, got {n}")
        bound = 4.0 / (n - 2)
        _require(0 <= p["delta0"] < bound,
                 f"delta0 = {p['delta0']} violates 0 <= delta0 < 4/(n-2) = {bound:g}")
        _require(p["parameter"] in ("L", "delta"), "parameter must be 'L' or 'delta'")
        _require(p["grid"] >= 16 and p["grid"] % 2 == 0, "grid must be even and >= 16")
        _require(p["ds"] > 0, "ds must be positive")
        L1 = first_bifurcation_length(n)
        if p["L"] is None:
            p["L"] = 0.8 * L1 if p["parameter"] == "L" else 1.5 * L1
        _require(p["L"] > 0, "L must be positive")
        if p["target"] is None:
            p["target"] = 1.5 * L1 if p["parameter"] == "L" else 0.0
        if p["parameter"] == "delta":
            _require(0 <= p["target"] <= p["delta0"],
                     f"delta target {p['target']} must lie in [0, delta0 = {p['delta0']}]")
            _require(p["delta0"] > 0 or p["target"] == 0, "delta sweep needs delta0 > 0")
        else:
            _require(p["target"] > 0, "L target must be positive")
    elif cmd == "reduced-energy":
        _require(n != 10, "n = 10 singular denominator in the closed form (n - 10)")
        _require(n >= 11, f"the reduced energy needs n >= 11, got n = {n}")
        p["eps"] = [_coerce("eps", float, e) for e in p["eps"]]
        _require(len(p["eps"]) > 0 and all(e > 0 for e in p["eps"]), "eps values must be positive")
        _require(p["workers"] >= 1, "workers must be >= 1")
    elif cmd == "pohozaev":
        from .pohozaev import CASES, MAX_DIMENSION
        _require(p["case"] in CASES, f"case must be one of {', '.join(CASES)}")
        _require(3 <= n <= MAX_DIMENSION, f"pohozaev needs 3 <= n <= {MAX_DIMENSION}, got n = {n}")
        _require(p["levels"] >= 3, f"refinement needs levels >= 3, got {p['levels']}")
        _require(p["base_grid"] >= 4, "base_grid must be >= 4")
        bound = 4.0 / (n - 2)
        _require(0 <= p["delta"] < bound, f"delta = {p['delta']} violates 0 <= delta < 4/(n-2) = {bound:g}")
    elif cmd == "bubbles":
        _require(n >= 3, f"n must be >= 3, got {n}")
        _require(all(q in ("north", "south") for q in p["poles"]), "poles must be 'north' or 'south'")
        _require(len(set(p["poles"])) == len(p["poles"]), "at most one bubble per pole")
        p["scales"] = [_coerce("scales", float, s) for s in p["scales"]]
        _require(len(p["scales"]) == len(p["poles"]), "one scale per pole is required")
        _require(all(0 < s < 0.5 for s in p["scales"]), "scales must lie in (0, 0.5)")
        _require(p["grid"] >= 20 * math.pi / min(p["scales"]),
                 "grid spacing must be <= eps/20 for every planted scale")
        _require(p["points"] >= 1, "points must be >= 1")
    elif cmd == "weyl":
        _require(n >= 4, f"random Weyl tensors need n >= 4 (the class is trivial for n = 3), got n = {n}")
        _require(11 <= p["scan_min"] <= p["scan_max"], "scan range must satisfy 11 <= scan_min <= scan_max")
        _require(0 < p["mu"] <= 1, f"need 0 < mu <= 1, got {p['mu']}")
        _require(0 <= p["lam"] <= p["rho"] <= 1 and p["rho"] > 0,
                 f"need 0 <= lam <= rho <= 1, got lam = {p['lam']}, rho = {p['rho']}")
        _require(p["fd_step"] > 0, "fd_step must be positive")


# experiments

@dataclass
class Outcome:
    checks: dict = field(default_factory=dict)
    results: dict = field(default_factory=dict)
    files: list = field(default_factory=list)
    lines: list = field(default_factory=list)


def _run_flow(cfg: ExperimentConfig, out: Path) -> Outcome:
    from .flow import FlowConfig, energy_identity_check, lojasiewicz_fit, run
    from .geometry import ProductSL, RoundSphere
    p = cfg.params
    n = p["n"]
    if p["manifold"] == "sphere":
        m = RoundSphere(n, p["grid"])
        u0 = 1 + p["amplitude"] * np.cos(p["mode"] * m.nodes)
    else:
        m = ProductSL(n, p["L"], p["grid"])
        u0 = 1 + p["amplitude"] * np.cos(2 * np.pi * p["mode"] * m.nodes / p["L"])
    traj = run(FlowConfig(m, u0, dt0=p["dt"], dt_max=p["dt_max"], max_change=p["max_change"],
                          tol=p["tol"], t_max=p["t_max"]))
    h = traj.history
    drift = float(np.max(np.abs(np.diff(h["vol"])))) if len(h["vol"]) > 1 else 0.0
    rise = float(np.max(np.diff(h["r"]), initial=0.0)) / max(1.0, float(np.max(np.abs(h["r"]))))
    o = Outcome()
    o.checks = {"converged": traj.converged, "volume_drift_per_step": drift <= 1e-12,
                "r_monotone": rise <= 1e-12}
    fit = lojasiewicz_fit(traj)
    o.results = {"status": traj.status, "t_final": traj.final.t, "r_final": traj.final.r,
                 "energy_final": traj.final.energy, "sup_residual": traj.final.sup_residual,
                 "volume_drift_per_step": drift, "max_relative_r_increase": rise,
                 "energy_identity_deviation": energy_identity_check(traj),
                 "lojasiewicz_gamma": fit.gamma, "steps": len(h["t"]) - 1,
                 "rejected_steps": traj.rejected}
    radius = p["radius"] if p["manifold"] == "sphere" else None
    cols = ["t", "r", "E", "volume", "supU", "supResidual", "concentration"]
    o.files.append(write_csv(out / "trajectory.csv", cols, traj.rows(radius)))
    o.files.append(write_csv(out / "final_field.csv", ["node", "value"],
                             zip(m.nodes, traj.final.u.values)))
    if p["plot"]:
        t = [s.t for s in traj.samples]
        o.files.append(write_svg(out / "r.svg", [(t, [s.r for s in traj.samples], "r(t)")],
                                 "mean scalar curvature", "t", "r"))
        o.files.append(write_svg(out / "energy.svg", [(t, [s.energy for s in traj.samples], "E(t)")],
                                 "Yamabe energy", "t", "E"))
        o.files.append(write_svg(out / "final_profile.svg", [(m.nodes, traj.final.u.values, "u")],
                                 "final conformal factor", "coordinate", "u"))
    o.lines.append(f"status {traj.status} at t = {traj.final.t:.6g}, r = {traj.final.r:.12g}, "
                   f"sup|R - r| = {traj.final.sup_residual:.3e}")
    return o


def _run_continue(cfg: ExperimentConfig, out: Path) -> Outcome:
    from .continuation import (SteadyProblem, continue_branch, enumerate_solutions,
                               morse_inequality_check, newton_solve, shooting_enumeration,
                               switch_branch)
    p = cfg.params
    n, L, d0 = p["n"], p["L"], p["delta0"]
    problem = SteadyProblem(n, L, d0, d0, p["grid"])
    cols = ["arc", "delta", "L", "E", "index", "nondegenerate", "supU"]
    o = Outcome()
    u0 = problem.constant_solution()
    branches = {}
    if p["parameter"] == "L":
        start = newton_solve(problem, np.full(p["grid"], u0))
        br = continue_branch(start, "L", p["target"], ds=p["ds"])
        branches["branch"] = br
        o.results["bifurcations"] = [b.value for b in br.bifurcations]
        o.results["first_bifurcation_length"] = first_bifurcation_length(n)
        if p["switch"]:
            if not br.bifurcations:
                raise RuntimeError("no bifurcation detected on the branch; nothing to switch to")
            rec = switch_branch(br, br.bifurcations[0])
            branches["branch_switched"] = continue_branch(rec, "L", p["target"], ds=p["ds"])
    else:
        s = problem.manifold().nodes
        seed = u0 * (1 + p["start_amplitude"] * np.cos(2 * np.pi * s / L))
        start = newton_solve(problem, seed)
        br = continue_branch(start, "delta", p["target"], ds=p["ds"])
        branches["branch"] = br
        idx = [r.morse_index for r in br.records if r.nondegenerate]
        o.checks["morse_index_preserved"] = len(set(idx)) == 1 and len(idx) == len(br.records)
        o.results["morse_index"] = idx[0] if idx else None
    for name, b in branches.items():
        o.files.append(write_csv(out / f"{name}.csv", cols, b.rows()))
        o.checks[f"{name}_solved"] = all(r.residual <= 1e-8 for r in b.records)
        o.results[f"{name}_points"] = len(b.records)
        o.results[f"{name}_turning_points"] = len(b.turning_points)
    if p["enumerate"]:
        sols = enumerate_solutions(problem)
        rep = morse_inequality_check(sols)
        roots = shooting_enumeration(problem)
        o.files.append(write_csv(out / "enumeration.csv", ["id"] + cols[1:] + ["u_at_0"],
                                 [[i, r.delta, r.L, r.energy, r.morse_index, r.nondegenerate,
                                   r.sup_u, r.u.values[0]] for i, r in enumerate(sols)]))
        o.files.append(write_csv(out / "morse_inequalities.csv", ["l", "alternating_sum", "bound", "pass"],
                                 rep.rows))
        o.checks["morse_inequalities"] = rep.all_pass
        o.checks["shooting_count_agrees"] = len(roots) == len(sols)
        o.results.update({"solutions": len(sols), "shooting_solutions": len(roots),
                          "morse_tallies": rep.tallies, "convention": rep.convention,
                          "caveat": rep.caveat})
        o.lines.append(f"{len(sols)} solutions (shooting: {len(roots)}), index tallies {rep.tallies}")
    if p["plot"]:
        series = [([r.L for r in b.records], [r.sup_u for r in b.records], name)
                  for name, b in branches.items()]
        if p["parameter"] == "delta":
            series = [([r.delta for r in b.records], [r.sup_u for r in b.records], name)
                      for name, b in branches.items()]
        o.files.append(write_svg(out / "bifurcation.svg", series, "bifurcation diagram",
                                 p["parameter"], "sup u"))
    for name, b in branches.items():
        o.lines.append(f"{name}: {len(b.records)} points, bifurcations at "
                       f"{[round(x.value, 8) for x in b.bifurcations]}")
    return o


def _run_reduced(cfg: ExperimentConfig, out: Path) -> Outcome:
    from .reduced import F0_closed_form, F0_quadrature, ReducedEnergyContext, angular_moments, \
        critical_epsilon
    from .weyl import random_weyl
    p = cfg.params
    W = random_weyl(p["n"], p["seed"])
    ctx = ReducedEnergyContext(p["n"], W)
    mom = angular_moments(W)

    def one(eps):
        q = F0_quadrature(ctx, eps, mom)
        return eps, float(F0_closed_form(ctx, eps)), q

    with ThreadPoolExecutor(max_workers=p["workers"]) as pool:
        rows = sorted(pool.map(one, p["eps"]), key=lambda r: r[0])
    rel = [abs(q.total - c) / abs(c) for _, c, q in rows]
    crit = critical_epsilon(p["n"])
    o = Outcome()
    o.checks["closed_form_agreement"] = max(rel) <= p["rtol"]
    o.results = {"max_relative_difference": max(rel), "critical_exists": crit.exists,
                 "critical_eps": [float(e) for e in crit.eps],
                 "critical_s": [str(s) for s in crit.s_roots],
                 "second_derivative_signs": list(crit.second_derivative_signs)}
    o.files.append(write_csv(out / "reduced_energy.csv",
                             ["eps", "F_closed", "F_quad", "term1", "term2", "term3"],
                             [[e, c, q.total, q.term1, q.term2, q.term3] for e, c, q in rows]))
    if p["plot"]:
        xs = [r[0] for r in rows]
        o.files.append(write_svg(out / "reduced_energy.svg",
                                 [(xs, [r[1] for r in rows], "closed form"),
                                  (xs, [r[2].total for r in rows], "quadrature")],
                                 "F(0, eps)", "eps", "F"))
    o.lines.append(f"max relative difference {max(rel):.3e}; critical eps "
                   f"{[f'{float(e):.10g}' for e in crit.eps]}")
    return o


def _run_pohozaev(cfg: ExperimentConfig, out: Path) -> Outcome:
    from .pohozaev import refinement_study, standard_case
    p = cfg.params
    prob = standard_case(p["case"], p["n"], p["base_grid"], p["seed"], p["delta"])
    study = refinement_study(prob, p["levels"], p["base_grid"])
    o = Outcome()
    if p["case"] == "non-solution":
        o.checks["negative_control_fails_to_converge"] = (
            not study.exact_zero and study.residuals[-1] > 0.5 * study.residuals[0])
    else:
        o.checks["identity_converges"] = study.passed
    o.results = {"levels": study.levels, "residuals": study.residuals, "orders": study.orders,
                 "exact_zero": study.exact_zero, "scale": study.scale,
                 "warning": study.reports[-1].warning}
    rows = [row for rep in study.reports for row in rep.rows()]
    o.files.append(write_csv(out / "pohozaev_terms.csv", ["term", "value", "level"], rows))
    o.files.append(write_csv(out / "refinement.csv", ["level", "residual", "order"], study.rows()))
    if p["plot"]:
        o.files.append(write_svg(out / "refinement.svg",
                                 [(np.log2(study.levels), study.residuals, "residual")],
                                 "identity residual", "log2(level)", "residual", logy=True))
    o.lines.append(f"{'level':>6} {'residual':>12} {'order':>7}")
    for lv, res, order in study.rows():
        o.lines.append(f"{lv:>6d} {res:12.4e} {order:7.3f}")
    if study.exact_zero:
        o.lines.append("all residuals at round-off: order test skipped")
    return o


def _run_bubbles(cfg: ExperimentConfig, out: Path) -> Outcome:
    from .bubbles import (BubbleParams, bubble_energy_flat, bubble_residual, extract_bubbles,
                          plant_bubbles)
    from .geometry import Field, RoundSphere, yamabe_energy, yamabe_sphere
    p = cfg.params
    n = p["n"]
    rng = np.random.default_rng(p["seed"])
    b = BubbleParams(rng.standard_normal(n), float(np.exp(rng.uniform(-1, 1))))
    pts = b.xi + b.eps * rng.standard_normal((p["points"], n)) * 3
    res = bubble_residual(b, pts)
    Y = yamabe_sphere(n)
    energy_err = abs(bubble_energy_flat(n, b) - Y) / Y

    m = RoundSphere(n, p["grid"])
    centres = [0.0 if q == "north" else math.pi for q in p["poles"]]
    k = len(centres)
    c_plant = k ** (2.0 / n) * Y
    u = plant_bubbles(m, n, c_plant, centres, p["scales"])
    c = yamabe_energy(m, u)
    dec = extract_bubbles(Field(m, u), c, p["threshold"])
    found = sorted(dec.bubbles, key=lambda fb: fb.centre[0])
    planted = sorted(zip(centres, p["scales"]))
    eps_err = [abs(fb.eps - e) / e for fb, (_, e) in zip(found, planted)] if dec.m == k else []
    o = Outcome()
    o.checks = {"analytic_residual": res <= 1e-12, "flat_energy": energy_err <= 1e-6,
                "bubble_count": dec.m == k,
                "scales_within_1pct": bool(eps_err) and max(eps_err) <= 0.01,
                "quantization_within_1pct": dec.quantization_error / c <= 0.01}
    o.results = {"analytic_residual": res, "flat_energy_relative_error": energy_err,
                 "measured_c": c, "planted_c": c_plant, "m": dec.m,
                 "eps_relative_errors": eps_err,
                 "quantization_relative_defect": dec.quantization_error / c}
    (out / "decomposition.json").write_text(dec.to_json() + "\n")
    o.files.append(out / "decomposition.json")
    o.files.append(write_csv(out / "remainder.csv", ["node", "value"], zip(m.nodes, dec.remainder)))
    if p["plot"]:
        o.files.append(write_svg(out / "planted.svg", [(m.nodes, u, "u"), (m.nodes, dec.remainder, "remainder")],
                                 "planted bubbles", "theta", "u"))
    o.lines.append(f"recovered m = {dec.m} (planted {k}); eps errors "
                   f"{[f'{e:.2e}' for e in eps_err]}; quantization defect {dec.quantization_error / c:.2e}")
    return o


def _run_weyl(cfg: ExperimentConfig, out: Path) -> Outcome:
    from .reduced import critical_dimension_scan, critical_epsilon
    from .weyl import (PerturbationSpec, origin_jet_check, random_weyl, size_diagnostic, tensor_rows,
                       weyl_coupling_norm)
    p = cfg.params
    n = p["n"]
    W = random_weyl(n, p["seed"])
    viol = W.violations()
    o = Outcome()
    o.checks["weyl_invariants"] = W.is_valid(1e-12)
    o.results = {"coupling_norm": weyl_coupling_norm(W), **viol}
    rows = [("coupling_norm", o.results["coupling_norm"])] + sorted(viol.items())
    if p["scan_critical_dimension"]:
        dims = range(p["scan_min"], p["scan_max"] + 1)
        found = critical_dimension_scan(dims)
        o.results["critical_dimension"] = found
        o.checks["critical_dimension_found"] = found is not None
        scan_rows = []
        for d in dims:
            ce = critical_epsilon(d)
            e = [float(x) for x in ce.eps] + [float("nan")] * (2 - len(ce.eps))
            scan_rows.append([d, float(ce.discriminant), ce.exists, e[0], e[1]])
        o.files.append(write_csv(out / "critical_scan.csv",
                                 ["n", "discriminant", "exists", "eps_1", "eps_2"], scan_rows))
        o.lines.append(str(found))
    if p["jet"]:
        spec = PerturbationSpec(mu=p["mu"], lam=p["lam"], rho=p["rho"])
        chk = origin_jet_check(spec, W, p["fd_step"])
        o.checks["origin_jet"] = chk.passed()
        alpha = size_diagnostic(spec, W)
        o.results.update({"jet_norms": chk.norms, "jet_tol": chk.tol, "jet_margin": chk.margin,
                          "alpha": alpha})
        rows += [(f"jet_{k}", v) for k, v in chk.norms.items()] + [("jet_tol", chk.tol), ("alpha", alpha)]
        o.lines.append(f"|W| = {chk.norms['weyl']:.3e}, |nabla W| = {chk.norms['nabla_weyl']:.3e}, "
                       f"|nabla^2 W| = {chk.norms['nabla2_weyl']:.6g}, tol = {chk.tol:.3e}")
    o.files.append(write_csv(out / "weyl_summary.csv", ["quantity", "value"], rows))
    if p["tensor"]:
        o.files.append(write_csv(out / "weyl_tensor.csv", ["i", "j", "k", "l", "value"], tensor_rows(W.components)))
    return o


RUNNERS = {"flow": _run_flow, "continue": _run_continue, "reduced-energy": _run_reduced,
           "pohozaev": _run_pohozaev, "bubbles": _run_bubbles, "weyl": _run_weyl}


def run_experiment(cfg: ExperimentConfig, stream=None) -> int:
    stream = stream or sys.stdout
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    np.random.seed(cfg.params["seed"])
    t0 = time.perf_counter()
    try:
        o = RUNNERS[cfg.command](cfg, out)
    except Exception as exc:  # surfaced with context
        print(f"error: {cfg.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    wall = time.perf_counter() - t0
    passed = all(bool(v) for v in o.checks.values())
    summary = {"command": cfg.command, "passed": passed,
               "checks": {k: bool(v) for k, v in o.checks.items()}, "results": o.results}
    write_json(out / "summary.json", summary)
    manifest = {"schema_version": MANIFEST_SCHEMA, "command": cfg.command, "config": cfg.params,
                "config_file": cfg.config_file, "config_hash": cfg.hash,
                "versions": {"conformal_lab": __version__, "python": platform.python_version(),
                             "numpy": np.__version__, "scipy": scipy.__version__},
                "wall_time_s": wall,
                "outputs": sorted(Path(f).name for f in o.files) + ["summary.json"]}
    write_json(out / "manifest.json", manifest)
    for line in o.lines:
        print(line, file=stream)
    for k, v in o.checks.items():
        print(f"check {k}: {'PASS' if v else 'FAIL'}", file=stream)
    print(f"outputs in {out}", file=stream)
    return 0 if passed else 1


def main(argv=None) -> int:
    try:
        cfg = parse_and_validate(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return run_experiment(cfg)


if __name__ == "__main__":
    sys.exit(main())
