"""Batch front end: ``gsmp run <config.toml>`` and ``gsmp plot <csv> --kind <k>``.

Exit codes: 0 when every configured check passes, 1 when a check fails,
2 for configuration or input errors (the message names the offending key).
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

from . import plots
from .adjoint_smp import (
    SMP_FLAGS,
    duality_residual,
    minimax_certificate,
    necessary_condition_residual,
    sample_controls,
    solve_adjoint_p,
    solve_adjoint_terminal,
    sufficient_condition_check,
)
from .mf_gsde import (
    ControlProcess,
    ProblemSpec,
    _as_nodes,
    cost,
    CapabilityError,
    directional_derivative,
    payoff,
    simulate,
)
from .optimizer import LQSpec, descend, lq_problem
from .problems import TERMS, Poly2, additive_problem, meanfield_drift_problem, polynomial_problem
from .scenario_tree import (
    DEFAULT_ENUMERATION_BUDGET,
    VolatilityGrid,
    TreeSizeError,
    _fmt,
    expectation_under_policy,
    g_expectation,
    node_budget,
    policy_blocks,
    policy_support_size,
)
from .sublinear_calculus import (
    LionsFunctional,
    gamma_distance,
    left_derivative,
    lions_right_derivative,
    lions_sup,
    maximizing_set,
    policy_in_selection,
    restricted_sup,
    right_derivative,
    select_measure,
    select_measure_path,
)

FAMILIES = ("lq", "additive", "meanfield-drift", "custom-polynomial")
RUN_KINDS = ("simulate", "derivative-check", "gamma-sweep", "smp-check", "optimize", "lq-demo",
             "selection-demo", "lions-check")
DEFAULT_TOLERANCES = {"smp": 1e-6, "descent": 1e-7, "fd": 1e-4, "exact": 1e-10}
LQ_DEFAULTS = {"A": 0.2, "B": 1.0, "C": 0.3, "D": 0.4}


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


# --------------------------------------------------------------------------- config


@dataclass
class ExperimentConfig:
    family: str
    problem: ProblemSpec
    kind: str
    seed: int
    tolerances: dict[str, float]
    run: dict[str, Any]
    out_dir: Path
    plots: bool = False
    raw: dict = field(default_factory=dict, repr=False)


def _num(table: dict, key: str, default, where: str, cast=float):
    val = table.get(key, default)
    if val is None:
        raise ConfigError(f"{where}.{key}", "is required")
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ConfigError(f"{where}.{key}", f"expected a number, got {val!r}")
    if cast is int:
        if isinstance(val, float) and not val.is_integer():
            raise ConfigError(f"{where}.{key}", f"expected an integer, got {val!r}")
        return int(val)
    out = float(val)
    if not math.isfinite(out):
        raise ConfigError(f"{where}.{key}", "must be finite")
    return out


def _table(raw: dict, key: str) -> dict:
    val = raw.get(key, {})
    if not isinstance(val, dict):
        raise ConfigError(key, "expected a table")
    return val


def _poly(table: dict, key: str, where: str, default: Poly2 | None = None) -> Poly2:
    if key not in table:
        if default is None:
            raise ConfigError(f"{where}.{key}", "is required")
        return default
    spec = table[key]
    if not isinstance(spec, dict):
        raise ConfigError(f"{where}.{key}", f"expected a table of terms from {list(TERMS)}")
    try:
        return Poly2.from_mapping({k: _num(spec, k, None, f"{where}.{key}") for k in spec})
    except KeyError as exc:
        raise ConfigError(f"{where}.{key}", str(exc.args[0])) from None


def _grid(tree: dict) -> VolatilityGrid:
    vals = tree.get("grid", [0.5, 1.0])
    if not isinstance(vals, list) or not vals:
        raise ConfigError("tree.grid", "expected a non-empty list of volatilities")
    try:
        return VolatilityGrid(tuple(float(v) for v in vals))
    except (TypeError, ValueError) as exc:
        raise ConfigError("tree.grid", str(exc)) from None


def build_problem(raw: dict) -> tuple[str, ProblemSpec]:
    prob = _table(raw, "problem")
    tree = _table(raw, "tree")
    family = prob.get("family", "lq")
    if family not in FAMILIES:
        raise ConfigError("problem.family", f"unknown family {family!r}; choose from {list(FAMILIES)}")
    N = _num(tree, "N", 3, "tree", int)
    if N < 1:
        raise ConfigError("tree.N", f"must be >= 1, got {N}")
    T = _num(tree, "T", 1.0, "tree")
    if T <= 0:
        raise ConfigError("tree.T", f"must be > 0, got {T}")
    grid = _grid(tree)
    budget = node_budget()
    if (2 * len(grid)) ** N > budget:
        raise ConfigError(
            "tree.N", f"N={N} with |grid|={len(grid)} needs {(2 * len(grid)) ** N} leaves, over the node budget {budget}"
        )
    common = dict(
        x0=_num(prob, "x0", 1.0, "problem"),
        u_lo=_num(prob, "u_lo", -5.0 if family == "lq" else -2.0, "problem"),
        u_hi=_num(prob, "u_hi", 5.0 if family == "lq" else 2.0, "problem"),
        T=T, N=N, grid=grid,
    )
    if common["u_lo"] > common["u_hi"]:
        raise ConfigError("problem.u_lo", "must not exceed problem.u_hi")
    params = _table(prob, "params") if "params" in prob else {}
    where = "problem.params"

    def p(key, default):
        return _num(params, key, default, where)

    if family == "lq":
        spec = LQSpec(*(p(k, LQ_DEFAULTS[k]) for k in "ABCD"))
        problem = lq_problem(spec, common["x0"], T, N, grid, common["u_lo"], common["u_hi"])
    elif family == "additive":
        problem = additive_problem(a=p("a", 0.0), bu=p("bu", 1.0), s=p("s", 1.0), **common)
    elif family == "meanfield-drift":
        problem = meanfield_drift_problem(kappa=p("kappa", 1.0), bu=p("bu", 1.0), c=p("c", 0.5),
                                          d=p("d", 0.0), **common)
    else:
        ident = Poly2.of(x=1.0)
        problem = polynomial_problem(
            b=_poly(prob, "b", "problem"), sigma=_poly(prob, "sigma", "problem"),
            beta=_poly(prob, "beta", "problem", Poly2()),
            Phi=_poly(prob, "Phi", "problem"), l=_poly(prob, "l", "problem"),
            phi=tuple(_poly(prob, f"phi{i}", "problem", ident) for i in range(1, 6)),
            **common,
        )
    return family, problem


def load_config(path, out_override=None) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError("config", f"file {path} not found") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("config", f"invalid TOML: {exc}") from None
    try:
        family, problem = build_problem(raw)
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError("problem", str(exc)) from None
    run = _table(raw, "run")
    kind = run.get("kind", "lq-demo")
    if kind not in RUN_KINDS:
        raise ConfigError("run.kind", f"unknown run {kind!r}; choose from {list(RUN_KINDS)}")
    seed = _num(run, "seed", 0, "run", int)
    if not 0 <= seed < 2**64:
        raise ConfigError("run.seed", "must be an unsigned 64-bit integer")
    tols = dict(DEFAULT_TOLERANCES)
    for k, v in _table(raw, "tolerances").items():
        if k not in tols:
            raise ConfigError(f"tolerances.{k}", f"unknown tolerance; choose from {sorted(tols)}")
        val = _num({k: v}, k, None, "tolerances")
        if val <= 0:
            raise ConfigError(f"tolerances.{k}", "must be > 0")
        tols[k] = val
    needs_smp = kind in ("smp-check", "optimize", "lq-demo")
    if kind == "lq-demo" and family != "lq":
        raise ConfigError("run.kind", "lq-demo needs problem.family = 'lq'")
    if needs_smp:
        missing = [f for f in ("a3_monotone", *SMP_FLAGS) if not getattr(problem, f)]
        if missing:
            raise ConfigError("run.kind", f"{kind} needs a problem with {', '.join(missing)}; "
                                          f"family {family!r} lacks it")
    if kind == "lions-check":
        count = len(problem.grid) ** sum(2**k for k in range(problem.N))
        if count > DEFAULT_ENUMERATION_BUDGET:
            raise ConfigError("tree.N", f"lions-check enumerates {count} policies, over the budget")
    output = _table(raw, "output")
    out_dir = Path(out_override) if out_override else Path(output.get("dir", "out"))
    return ExperimentConfig(family, problem, kind, seed, tols, run, out_dir,
                            bool(output.get("plots", False)), raw)


# --------------------------------------------------------------------------- outputs


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(x) if isinstance(x, float) else x for x in row])


def write_json(path: Path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2, ensure_ascii=False, allow_nan=True)
        fh.write("\n")


@dataclass
class Outcome:
    checks: list[tuple[str, bool, str]] = field(default_factory=list)
    files: list[Path] = field(default_factory=list)
    plot_kinds: dict[Path, str] = field(default_factory=dict)

    def check(self, name: str, ok: bool, detail: str = "") -> None:
        self.checks.append((name, bool(ok), detail))

    @property
    def passed(self) -> bool:
        return bool(self.checks) and all(ok for _, ok, _ in self.checks)


def _control(cfg: ExperimentConfig) -> ControlProcess:
    p = cfg.problem
    val = _num(cfg.run, "control", 0.0, "run")
    if not p.u_lo <= val <= p.u_hi:
        raise ConfigError("run.control", f"{val} lies outside the control box [{p.u_lo}, {p.u_hi}]")
    return ControlProcess.constant(p.tree, val)


def _random_fields(cfg: ExperimentConfig):
    rng = np.random.default_rng(cfg.seed)
    n = cfg.problem.tree.node_count(cfg.problem.N)
    return rng, rng.normal(size=n), rng.normal(size=n)


# --------------------------------------------------------------------------- run kinds


def run_simulate(cfg, out: Outcome, pool_map) -> None:
    p = cfg.problem
    traj = simulate(p, _control(cfg))
    J = cost(p, traj.u, traj)
    path = cfg.out_dir / "trajectory.csv"
    traj.to_csv(path)
    out.files.append(path)
    if cfg.run.get("tree_dump", False):
        tpath = cfg.out_dir / "tree.csv"
        p.tree.to_csv(tpath)
        out.files.append(tpath)
    gap = max(abs(g_expectation(p.tree, _as_nodes(p.phi[i](x), len(x))) - traj.rho[i, k])
              for k, x in enumerate(traj.X) for i in range(5))
    out.check("mean-field consistency", gap <= 1e-12, f"max |rho - recomputed| = {gap:.3e}")
    out.check("finite cost", math.isfinite(J), f"J = {J!r}")


def run_derivative_check(cfg, out: Outcome, pool_map) -> None:
    p = cfg.problem
    p.require("beta_zero")
    u = _control(cfg)
    rng = np.random.default_rng(cfg.seed)
    count = _num(cfg.run, "directions", 5, "run", int)
    theta = _num(cfg.run, "theta", 1e-6, "run")
    J = cost(p, u)
    dirs = [ControlProcess(tuple(rng.uniform(-1, 1, p.tree.node_count(k)) for k in range(p.N)))
            for _ in range(count)]

    def evaluate(v):
        right = directional_derivative(p, u, v)
        left = -directional_derivative(p, u, v.scale(-1.0))
        fd = (cost(p, (u + v.scale(theta)).clip(p.u_lo, p.u_hi)) - J) / theta
        return right, left, fd

    rows = []
    for i, (right, left, fd) in enumerate(pool_map(evaluate, dirs)):
        rows.append((i, right, left, fd))
        out.check(f"direction {i}: finite difference", abs(fd - right) <= cfg.tolerances["fd"] * (1 + abs(right)),
                  f"right {right:.10g} fd {fd:.10g}")
        out.check(f"direction {i}: left <= right", left <= right + cfg.tolerances["exact"],
                  f"left {left:.10g} right {right:.10g}")
        if len(p.grid) == 1:
            out.check(f"direction {i}: left == right", abs(left - right) <= cfg.tolerances["exact"] * (1 + abs(right)),
                      "single volatility")
    path = cfg.out_dir / "derivative_check.csv"
    write_csv(path, ("direction", "right", "left", "fd"), rows)
    out.files.append(path)


def run_gamma_sweep(cfg, out: Outcome, pool_map) -> None:
    tree = cfg.problem.tree
    _, xi, eta = _random_fields(cfg)
    eps = [2.0**-j for j in range(1, 21)]
    gam = list(pool_map(lambda e: gamma_distance(tree, xi, eta, e), eps))
    path = cfg.out_dir / "gamma.csv"
    write_csv(path, ("eps", "gamma"), zip(eps, gam))
    out.files.append(path)
    out.plot_kinds[path] = "gamma"
    eps0 = None
    for e, g in zip(reversed(eps), reversed(gam)):
        if g != 0.0:
            break
        eps0 = e
    out.check("gamma vanishes below some eps0 >= 2^-20", eps0 is not None,
              f"eps0 = {eps0!r}")
    right, left = right_derivative(tree, xi, eta), left_derivative(tree, xi, eta)
    lams = np.linspace(-1.0, 1.0, 41)
    F = [g_expectation(tree, xi + lam * eta) for lam in lams]
    cpath = cfg.out_dir / "convexity.csv"
    write_csv(cpath, ("lambda", "F", "right", "left"),
              ((float(lam), f, right, left) for lam, f in zip(lams, F)))
    out.files.append(cpath)
    out.plot_kinds[cpath] = "convexity"
    out.check("left <= right", left <= right + cfg.tolerances["exact"], f"{left:.10g} <= {right:.10g}")


def _smp_reports(cfg, out: Outcome, u_hat: ControlProcess, pool_map) -> dict:
    p = cfg.problem
    samples = _num(cfg.run, "samples", 100, "run", int)
    traj = simulate(p, u_hat)
    J = cost(p, u_hat, traj)
    tol = cfg.tolerances["smp"] * (abs(J) + 1)
    rng = np.random.default_rng(cfg.seed)
    controls = sample_controls(p, u_hat, samples, rng)
    residuals = list(pool_map(lambda u: necessary_condition_residual(p, u_hat, u, traj), controls))
    worst = min(residuals) if residuals else 0.0
    out.check("necessary condition over samples", worst >= -tol, f"min residual {worst:.3e}, tol {tol:.3e}")
    suff = sufficient_condition_check(p, u_hat, samples, cfg.seed, tol, map_fn=pool_map)
    out.check("sufficient condition", suff.passed, suff.reason)
    report = {
        "J": J,
        "necessary_min_residual": worst,
        "sufficiency": suff.status,
        "witness_control": suff.witness.as_lists() if suff.witness is not None else None,
        "residual": worst,
        "status": "not-applicable",
        "P_star": None,
        "Q_star": None,
    }
    if p.a3_prime:
        cert = minimax_certificate(p, u_hat, tol)
        out.check("minimax certificate", cert.accepted, f"status {cert.status}, residual {cert.residual:.3e}")
        P, Q = cert.P_star, cert.Q_star
        report.update(residual=cert.residual, status=cert.status,
                      P_star=P.as_lists(), Q_star=Q.as_lists())
    else:
        P = maximizing_set(p.tree, payoff(traj)).first_policy()
        Q = P
    duals = []
    adj_p = solve_adjoint_p(p, traj, P)
    xN = traj.X[-1]
    adj_q = solve_adjoint_terminal(p, traj, Q, _as_nodes(p.dphi[3](xN), len(xN)))
    for u in controls[: min(4, len(controls))]:
        v = u - u_hat
        duals.append(duality_residual(p, traj, P, adj_p, v))
        duals.append(duality_residual(p, traj, Q, adj_q, v))
    report["duality_residuals"] = duals
    scale = max(1.0, max(abs(x) for x in u_hat.flat()))
    out.check("duality identities", all(d <= cfg.tolerances["exact"] * scale for d in duals),
              f"max {max(duals) if duals else 0.0:.3e}")
    return report


def _descend(cfg, out: Outcome, trace_name: str):
    p = cfg.problem
    max_iters = _num(cfg.run, "max_iters", 300, "run", int)
    rep = descend(p, _control(cfg), max_iters=max_iters, tol=cfg.tolerances["descent"])
    path = cfg.out_dir / trace_name
    rep.to_csv(path)
    out.files.append(path)
    out.plot_kinds[path] = "descent"
    Js = [it[0] for it in rep.iterates]
    mono = all(b <= a + 1e-12 for a, b in zip(Js, Js[1:]))
    out.check("descent converged", rep.converged, f"{rep.message}; residual {rep.residual:.3e}")
    out.check("cost non-increasing", bool(Js) and mono,
              f"J {Js[0]:.10g} -> {Js[-1]:.10g}" if Js else rep.message)
    return rep


def run_optimize(cfg, out: Outcome, pool_map) -> None:
    _descend(cfg, out, "descent.csv")


def run_smp_check(cfg, out: Outcome, pool_map) -> None:
    u_hat = _descend(cfg, out, "descent.csv").control if cfg.run.get("optimize", True) else _control(cfg)
    report = _smp_reports(cfg, out, u_hat, pool_map)
    path = cfg.out_dir / "smp_report.json"
    report["checks"] = {name: ok for name, ok, _ in out.checks}
    write_json(path, report)
    out.files.append(path)


def run_lq_demo(cfg, out: Outcome, pool_map) -> None:
    p = cfg.problem
    rep = _descend(cfg, out, "lq_trace.csv")
    report = _smp_reports(cfg, out, rep.control, pool_map)
    shift = _num(cfg.run, "perturbation", 0.1, "run")
    bumped = ControlProcess(tuple(a + shift for a in rep.control.levels)).clip(p.u_lo, p.u_hi)
    samples = _num(cfg.run, "samples", 100, "run", int)
    bad = sufficient_condition_check(p, bumped, samples, cfg.seed, map_fn=pool_map)
    out.check("perturbed control rejected", not bad.passed and bad.witness is not None, bad.reason)
    report["perturbed_witness_control"] = bad.witness.as_lists() if bad.witness is not None else None
    report["checks"] = {name: ok for name, ok, _ in out.checks}
    path = cfg.out_dir / "smp_report.json"
    write_json(path, report)
    out.files.append(path)


def run_selection_demo(cfg, out: Outcome, pool_map) -> None:
    tree = cfg.problem.tree
    rng, xi, eta = _random_fields(cfg)
    P = select_measure(tree, xi, eta)
    again = select_measure(tree, xi, eta)
    out.check("selection deterministic", P.same_map(again))
    count = tree.m ** policy_support_size(tree, tree.depth)
    if count <= DEFAULT_ENUMERATION_BUDGET:
        vals = np.concatenate([pr @ np.stack([xi, eta], 1) for _, pr in policy_blocks(tree)])
        best = vals[:, 0].max()
        inner = vals[vals[:, 0] >= best - 1e-9 * (1 + abs(best)), 1].max()
        ok = (abs(expectation_under_policy(tree, P, xi) - best) <= 1e-10
              and abs(expectation_under_policy(tree, P, eta) - inner) <= 1e-10)
        out.check("selection attains both maxima (enumeration)", ok)
    else:
        out.check("selection attains both maxima", policy_in_selection(tree, P, xi, eta))
    xs = [rng.normal(size=tree.node_count(k)) for k in range(tree.depth + 1)]
    es = [rng.normal(size=tree.node_count(k)) for k in range(tree.depth + 1)]
    path_a = select_measure_path(tree, xs, es)
    path_b = select_measure_path(tree, xs, es)
    out.check("selection path deterministic", all(a.same_map(b) for a, b in zip(path_a, path_b)))
    rows = [(k, i, int(c)) for k, level in enumerate(P.choice) for i, c in enumerate(level)]
    path = cfg.out_dir / "selection.csv"
    write_csv(path, ("level", "node_index", "sigma_index"), rows)
    out.files.append(path)


def run_lions_check(cfg, out: Outcome, pool_map) -> None:
    tree = cfg.problem.tree
    _, xi, eta = _random_fields(cfg)
    lin = LionsFunctional.linear(lambda x: x, lambda x: np.ones_like(x))
    red = abs(lions_right_derivative(tree, xi, eta, lin) - restricted_sup(tree, xi, eta))
    out.check("linear functional reduces to restricted sup", red <= 1e-12, f"gap {red:.3e}")
    rows = [("linear", 0.0, red)]
    eps = [10.0**-j for j in range(2, 6)]
    for name, F in (("squared-mean", LionsFunctional.squared_mean()), ("variance", LionsFunctional.variance())):
        d = lions_right_derivative(tree, xi, eta, F)
        base = lions_sup(tree, xi, F)
        errs = [abs((lions_sup(tree, xi + e * eta, F) - base) / e - d) for e in eps]
        for e, err in zip(eps, errs):
            rows.append((name, e, err))
        slope = fit_slope(eps, errs)
        out.check(f"{name} finite-difference order", slope >= 0.95 or max(errs) <= 1e-9,
                  f"log-log slope {slope:.3f}")
    path = cfg.out_dir / "lions_check.csv"
    write_csv(path, ("functional", "eps", "fd_error"), rows)
    out.files.append(path)


def fit_slope(xs, ys, floor: float = 1e-12) -> float:
    """Least-squares slope of log(y) on log(x); errors under ``floor`` count as exact."""
    pts = [(math.log(x), math.log(y)) for x, y in zip(xs, ys) if y > floor]
    if len(pts) < 2:
        return math.inf
    a = np.array(pts)
    return float(np.polyfit(a[:, 0], a[:, 1], 1)[0])


RUNNERS: dict[str, Callable] = {
    "simulate": run_simulate,
    "derivative-check": run_derivative_check,
    "gamma-sweep": run_gamma_sweep,
    "smp-check": run_smp_check,
    "optimize": run_optimize,
    "lq-demo": run_lq_demo,
    "selection-demo": run_selection_demo,
    "lions-check": run_lions_check,
}


def run(config_path, threads: int = 1, out_dir=None, stream=None) -> int:
    stream = sys.stdout if stream is None else stream
    try:
        cfg = load_config(config_path, out_dir)
        if threads < 1:
            raise ConfigError("--threads", "must be >= 1")
        cfg.out_dir.mkdir(parents=True, exist_ok=True)
        out = Outcome()
        if threads == 1:
            RUNNERS[cfg.kind](cfg, out, map)
        else:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                RUNNERS[cfg.kind](cfg, out, pool.map)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except CapabilityError as exc:
        print(f"config error: run.kind: {exc}", file=sys.stderr)
        return 2
    except TreeSizeError as exc:
        print(f"config error: tree.N: {exc}", file=sys.stderr)
        return 2
    if cfg.plots:
        for path, kind in out.plot_kinds.items():
            out.files.append(plots.emit_plot(path, kind))
    for name, ok, detail in out.checks:
        print(f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else ""), file=stream)
    for path in out.files:
        print(f"wrote {path}", file=stream)
    return 0 if out.passed else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="gsmp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    pr = sub.add_parser("run", help="run an experiment configuration")
    pr.add_argument("config")
    pr.add_argument("--threads", type=int, default=1)
    pr.add_argument("--out", default=None, help="output directory (overrides output.dir)")
    pp = sub.add_parser("plot", help="render a CSV table as SVG")
    pp.add_argument("csv")
    pp.add_argument("--kind", required=True, choices=sorted(plots.SCHEMAS))
    pp.add_argument("--out", default=None)
    args = parser.parse_args(argv)
    if args.command == "run":
        return run(args.config, args.threads, args.out)
    try:
        path = plots.emit_plot(args.csv, args.kind, args.out)
    except (plots.SchemaError, FileNotFoundError) as exc:
        print(f"plot error: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
