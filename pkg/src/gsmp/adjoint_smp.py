"""Adjoint equations under fixed policies and the maximum-principle checks.

Under a fixed policy the filtration of the tree is generated by binary
branches, so every martingale is a multiple of the next increment and the
orthogonal martingale part of the adjoint equation vanishes. At each node the
backward step reads the two children on the policy's branch::

    p_up = pbar + q*s*sqrt(dt),  p_dn = pbar - q*s*sqrt(dt)
    p    = pbar + (b_x*pbar + l_x) dt + sigma_x*q*s**2 dt

which makes the summation-by-parts identity between the variational process
and the adjoint exact. Every node is solved with its own policy choice, so
``p`` and ``q`` are finite off the support as well.

The maximum-principle checks assume ``beta = 0`` and coefficients ``b``,
``sigma`` free of the mean-field argument.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .mf_gsde import (
    ControlProcess,
    MeanFieldTrajectory,
    ProblemSpec,
    _as_nodes,
    cost,
    derivative_integrand,
    payoff,
    simulate,
    variational_process,
)
from .scenario_tree import LevelMismatchError, Policy, ScenarioTree, reach_probabilities
from .sublinear_calculus import maximizing_set, select_measure, select_measure_path

SMP_FLAGS = ("y_independent_dynamics", "beta_zero")
FICTITIOUS_PLAY_CAP = 10_000


class SingularStepError(ArithmeticError):
    """Local 2x2 backward system is singular."""


@dataclass(frozen=True, eq=False)
class AdjointTriple:
    """``p[k]`` on levels ``0..horizon``; ``pbar[k]``, ``q[k]`` on levels ``0..horizon-1``."""

    p: tuple[np.ndarray, ...] = field(repr=False)
    pbar: tuple[np.ndarray, ...] = field(repr=False)
    q: tuple[np.ndarray, ...] = field(repr=False)
    policy: Policy = field(repr=False)
    horizon: int
    running: bool = False  # True for the cost adjoint (terminal Phi_x, driver l_x)

    def max_abs(self) -> float:
        return float(max(np.abs(a).max() for a in self.p))


def _choice_vol(tree: ScenarioTree, P: Policy, k: int) -> np.ndarray:
    return tree.grid.as_array()[P.choice[k]]


def _backward(problem: ProblemSpec, traj: MeanFieldTrajectory, P: Policy, terminal: np.ndarray,
              horizon: int, running: bool) -> AdjointTriple:
    problem.require(*SMP_FLAGS)
    tree, dt = problem.tree, problem.dt
    P.check(tree, horizon)
    times = tree.times()
    sq = math.sqrt(dt)
    p = [None] * (horizon + 1)
    pbar = [None] * horizon
    q = [None] * horizon
    p[horizon] = tree.check_level(terminal, horizon).copy()
    for k in range(horizon - 1, -1, -1):
        x, uk = traj.X[k], traj.u.levels[k]
        n = len(x)
        j = P.choice[k]
        s = _choice_vol(tree, P, k)
        kids = tree.split(p[k + 1])[np.arange(n), j]  # (n, 2): up, down
        det = -2.0 * s * sq
        if np.any(np.abs(det) < 1e-300):
            raise SingularStepError(f"singular backward step at level {k}")
        pb = 0.5 * (kids[:, 0] + kids[:, 1])
        qq = (kids[:, 0] - kids[:, 1]) / (-det)
        bx = _as_nodes(problem.b_x(x, traj.rho[1, k], uk), n)
        sx = _as_nodes(problem.sigma_x(x, traj.rho[0, k], uk), n)
        lx = (_as_nodes(problem.l_x(times[k], x, traj.rho[4, k], uk), n) if running else 0.0)
        p[k] = pb + (bx * pb + lx) * dt + sx * qq * s**2 * dt
        pbar[k], q[k] = pb, qq
    for a in (*p, *pbar, *q):
        a.setflags(write=False)
    return AdjointTriple(p=tuple(p), pbar=tuple(pbar), q=tuple(q), policy=P, horizon=horizon,
                         running=running)


def solve_adjoint_p(problem: ProblemSpec, traj: MeanFieldTrajectory, P: Policy) -> AdjointTriple:
    """Adjoint with terminal ``Phi_x(x_N, rho4)`` and running driver ``l_x``."""
    xN = traj.X[-1]
    terminal = _as_nodes(problem.Phi_x(xN, traj.rho[3, -1]), len(xN))
    return _backward(problem, traj, P, terminal, problem.N, running=True)


def solve_adjoint_terminal(problem: ProblemSpec, traj: MeanFieldTrajectory, Q: Policy,
                           terminal, horizon: int | None = None) -> AdjointTriple:
    """Adjoint without running driver, ending at level ``horizon`` with the given field."""
    horizon = problem.N if horizon is None else horizon
    if not 0 <= horizon <= problem.N:
        raise LevelMismatchError(f"horizon {horizon} outside 0..{problem.N}")
    return _backward(problem, traj, Q, np.asarray(terminal, dtype=float), horizon, running=False)


def v_coefficients(problem: ProblemSpec, traj: MeanFieldTrajectory, adj: AdjointTriple,
                   with_lv: bool) -> list[np.ndarray]:
    """Per-node factor ``c`` such that the adjoint side equals ``E_P[sum c*v]``.

    The factor is ``(pbar*b_v + l_v) dt + q*sigma_v*s**2 dt`` (``l_v`` only for the
    running-cost adjoint); it does not include the policy's reach weights.
    """
    tree, dt = problem.tree, problem.dt
    times = tree.times()
    out = []
    for k in range(adj.horizon):
        x, uk = traj.X[k], traj.u.levels[k]
        n = len(x)
        s = _choice_vol(tree, adj.policy, k)
        bv = _as_nodes(problem.b_v(x, traj.rho[1, k], uk), n)
        sv = _as_nodes(problem.sigma_v(x, traj.rho[0, k], uk), n)
        c = (adj.pbar[k] * bv) * dt + adj.q[k] * sv * s**2 * dt
        if with_lv:
            c = c + _as_nodes(problem.l_v(times[k], x, traj.rho[4, k], uk), n) * dt
        out.append(c)
    return out


def _weighted_sum(weights: Sequence[np.ndarray], fields: Sequence[np.ndarray], v: ControlProcess) -> float:
    return float(sum(np.dot(w * f, vk) for w, f, vk in zip(weights, fields, v.levels)))


def _expect(w: np.ndarray, f: np.ndarray) -> float:
    return float(np.dot(w, f))


def duality_residual(problem: ProblemSpec, traj: MeanFieldTrajectory, P: Policy, adj: AdjointTriple,
                     v: ControlProcess, z: Sequence[np.ndarray] | None = None) -> float:
    """Gap between the variational and adjoint forms of the same pairing under ``P``.

    For the running-cost adjoint the state side is
    ``E_P[Phi_x z_N + sum (l_x z + l_v v) dt]``; for a terminal-type adjoint
    with horizon ``m`` it is ``E_P[p_m z_m]``.
    """
    if not adj.policy.same_map(P):
        raise ValueError("adjoint was solved under a different policy")
    tree, dt = problem.tree, problem.dt
    z = variational_process(problem, traj.u, v, traj) if z is None else z
    m = adj.horizon
    w = reach_probabilities(tree, P, m)
    running = adj.running
    lhs = _expect(w[m], adj.p[m] * z[m])
    if running:
        times = tree.times()
        for k in range(m):
            x, uk = traj.X[k], traj.u.levels[k]
            n = len(x)
            lx = _as_nodes(problem.l_x(times[k], x, traj.rho[4, k], uk), n)
            lv = _as_nodes(problem.l_v(times[k], x, traj.rho[4, k], uk), n)
            lhs += _expect(w[k], (lx * z[k] + lv * v.levels[k]) * dt)
    rhs = _weighted_sum(w[:m], v_coefficients(problem, traj, adj, running), v)
    return abs(lhs - rhs)



# --------------------------------------------------------------------------- theta


def _mf_weights(problem: ProblemSpec, traj: MeanFieldTrajectory, P: Policy):
    """``E_P[Phi_y]`` and per-level ``E_P[l_y(t_k)] dt`` under ``P``."""
    tree, dt = problem.tree, problem.dt
    times = tree.times()
    w = reach_probabilities(tree, P, problem.N)
    xN = traj.X[-1]
    phi_y = _expect(w[-1], _as_nodes(problem.Phi_y(xN, traj.rho[3, -1]), len(xN)))
    l_y = [
        _expect(w[k], _as_nodes(problem.l_y(times[k], traj.X[k], traj.rho[4, k], traj.u.levels[k]),
                                len(traj.X[k]))) * dt
        for k in range(problem.N)
    ]
    return w, phi_y, l_y


def _check_path(problem: ProblemSpec, R: Sequence[Policy] | None) -> list[Policy] | None:
    if R is None:
        return None
    R = list(R)
    if len(R) < problem.N:
        raise LevelMismatchError(f"need a selection for each of the {problem.N} running levels")
    return R


def theta_coefficients(problem: ProblemSpec, traj: MeanFieldTrajectory, P: Policy, Q: Policy,
                       R: Sequence[Policy] | None = None, weighted: bool = True) -> list[np.ndarray]:
    """Per-node coefficients ``g`` with ``Theta[P, Q, R](v) = sum_n g(n) v(n)``.

    Built from the adjoints under ``P`` (cost), ``Q`` (terminal mean field) and
    each ``R[k]`` (running mean field up to level ``k``). ``R`` may be omitted
    when the running cost ignores the mean-field argument. With
    ``weighted=False`` the reach probabilities are left out, which gives the
    conditional (node-local) slopes, defined off the supports as well.
    """
    problem.require(*SMP_FLAGS)
    R = _check_path(problem, R)
    tree = problem.tree
    w, phi_y, l_y = _mf_weights(problem, traj, P)
    adj_p = solve_adjoint_p(problem, traj, P)
    def reach(M, m):
        return reach_probabilities(tree, M, m) if weighted else [1.0] * (m + 1)

    g = [(w[k] if weighted else 1.0) * c
         for k, c in enumerate(v_coefficients(problem, traj, adj_p, True))]
    xN = traj.X[-1]
    if phi_y != 0.0:
        adj_q = solve_adjoint_terminal(problem, traj, Q, _as_nodes(problem.dphi[3](xN), len(xN)))
        wq = reach(Q, problem.N)
        for k, c in enumerate(v_coefficients(problem, traj, adj_q, False)):
            g[k] = g[k] + phi_y * wq[k] * c
    for m in range(1, problem.N):
        if l_y[m] == 0.0:
            continue
        if R is None:
            raise ValueError("running cost depends on the mean field; a selection path R is required")
        xm = traj.X[m]
        adj_r = solve_adjoint_terminal(problem, traj, R[m], _as_nodes(problem.dphi[4](xm), len(xm)), m)
        wr = reach(R[m], m)
        for k, c in enumerate(v_coefficients(problem, traj, adj_r, False)):
            g[k] = g[k] + l_y[m] * wr[k] * c
    return g


def theta(problem: ProblemSpec, u_hat: ControlProcess, P: Policy, Q: Policy,
          R: Sequence[Policy] | None, v: ControlProcess, route: str = "adjoint",
          traj: MeanFieldTrajectory | None = None) -> float:
    """Mean-field duality pairing ``Theta[P, Q, R](v)``.

    ``route="direct"`` evaluates expectations of the variational process;
    ``route="adjoint"`` pairs ``v`` with the adjoint coefficients.
    """
    problem.require("a3_monotone", *SMP_FLAGS)
    traj = simulate(problem, u_hat) if traj is None else traj
    if route == "adjoint":
        return _weighted_sum([np.ones(1)] * problem.N, theta_coefficients(problem, traj, P, Q, R), v)
    if route != "direct":
        raise ValueError(f"unknown route {route!r}")
    R = _check_path(problem, R)
    tree, dt = problem.tree, problem.dt
    times = tree.times()
    z = variational_process(problem, u_hat, v, traj)
    w, phi_y, l_y = _mf_weights(problem, traj, P)
    xN = traj.X[-1]
    out = _expect(w[-1], _as_nodes(problem.Phi_x(xN, traj.rho[3, -1]), len(xN)) * z[-1])
    for k in range(problem.N):
        x, uk = traj.X[k], traj.u.levels[k]
        n = len(x)
        lx = _as_nodes(problem.l_x(times[k], x, traj.rho[4, k], uk), n)
        lv = _as_nodes(problem.l_v(times[k], x, traj.rho[4, k], uk), n)
        out += _expect(w[k], (lx * z[k] + lv * v.levels[k]) * dt)
    if phi_y != 0.0:
        wq = reach_probabilities(tree, Q, problem.N)[-1]
        out += phi_y * _expect(wq, _as_nodes(problem.dphi[3](xN), len(xN)) * z[-1])
    for k in range(problem.N):
        if l_y[k] == 0.0:
            continue
        if R is None:
            raise ValueError("running cost depends on the mean field; a selection path R is required")
        wr = reach_probabilities(tree, R[k], k)[k]
        out += l_y[k] * _expect(wr, _as_nodes(problem.dphi[4](traj.X[k]), len(traj.X[k])) * z[k])
    return out


# --------------------------------------------------------------------------- necessary condition


@dataclass(frozen=True, eq=False)
class NecessaryEvaluation:
    value: float
    P: Policy = field(repr=False)
    Q: Policy = field(repr=False)
    R: tuple[Policy, ...] = field(repr=False)


def necessary_condition_evaluation(problem: ProblemSpec, u_hat: ControlProcess, u: ControlProcess,
                                   traj: MeanFieldTrajectory | None = None) -> NecessaryEvaluation:
    """Largest ``Theta[P, Q, R](u - u_hat)`` over the maximizing triples, with the attaining triple.

    The sup factorizes: the inner measures maximize their own mean-field
    slopes, and the outer one maximizes the aggregate among maximizers of the
    realized cost. Non-negative mean-field weights make this order valid.
    """
    problem.require("a3_monotone", *SMP_FLAGS)
    traj = simulate(problem, u_hat) if traj is None else traj
    tree = problem.tree
    v = u - u_hat
    z = variational_process(problem, u_hat, v, traj)
    nodes = [len(x) for x in traj.X]
    xN = traj.X[-1]
    Q = select_measure(tree, _as_nodes(problem.phi[3](xN), nodes[-1]),
                       _as_nodes(problem.dphi[3](xN), nodes[-1]) * z[-1])
    R = select_measure_path(
        tree,
        [_as_nodes(problem.phi[4](x), n) for x, n in zip(traj.X, nodes)],
        [_as_nodes(problem.dphi[4](x), n) * zk for x, n, zk in zip(traj.X, nodes, z)],
    )
    P = select_measure(tree, payoff(traj), derivative_integrand(problem, traj, v, z))
    return NecessaryEvaluation(theta(problem, u_hat, P, Q, R, v, traj=traj), P, Q, tuple(R))


def necessary_condition_residual(problem: ProblemSpec, u_hat: ControlProcess, u: ControlProcess,
                                 traj: MeanFieldTrajectory | None = None) -> float:
    return necessary_condition_evaluation(problem, u_hat, u, traj).value


# --------------------------------------------------------------------------- minimax certificate


def box_minimum(g: Sequence[np.ndarray], u_hat: ControlProcess, lo: float, hi: float) -> float:
    """``min over u in the box`` of ``sum g(n) (u(n) - u_hat(n))``; always <= 0."""
    return float(sum(np.minimum(gk * (lo - uk), gk * (hi - uk)).sum()
                     for gk, uk in zip(g, u_hat.levels)))


def box_minimizer(g: Sequence[np.ndarray], u_hat: ControlProcess, lo: float, hi: float) -> ControlProcess:
    levels = []
    for gk, uk in zip(g, u_hat.levels):
        levels.append(np.where(gk > 0, lo, np.where(gk < 0, hi, uk)))
    return ControlProcess(tuple(levels))


def smp_tolerance(J: float) -> float:
    return 1e-6 * (abs(J) + 1.0)


@dataclass(frozen=True, eq=False)
class MinimaxCertificate:
    P_star: Policy = field(repr=False)
    Q_star: Policy = field(repr=False)
    residual: float
    status: str  # exact | approximate | inconclusive
    gap: float
    iterations: int
    tol: float

    @property
    def accepted(self) -> bool:
        return self.status in ("exact", "approximate") and self.residual >= -self.tol


def _policy_key(P: Policy) -> bytes:
    return b"".join(c.tobytes() for c in P.choice)


def minimax_certificate(problem: ProblemSpec, u_hat: ControlProcess, tol: float | None = None,
                        max_iter: int = FICTITIOUS_PLAY_CAP) -> MinimaxCertificate:
    """Pair ``(P*, Q*)`` whose pairing is as non-negative as possible over the whole box.

    With singleton maximizer sets the pair is forced. Otherwise fictitious
    play alternates box-corner responses against the averaged measure
    coefficients with policy best responses against the averaged control.
    """
    problem.require("a3_prime", *SMP_FLAGS)
    traj = simulate(problem, u_hat)
    J = cost(problem, u_hat, traj)
    tol = smp_tolerance(J) if tol is None else tol
    tree = problem.tree
    lo, hi = problem.u_lo, problem.u_hi
    psi = payoff(traj)
    xN = traj.X[-1]
    phi4 = _as_nodes(problem.phi[3](xN), len(xN))
    dphi4 = _as_nodes(problem.dphi[3](xN), len(xN))
    A = maximizing_set(tree, psi)
    B = maximizing_set(tree, phi4)
    P0, Q0 = A.first_policy(), B.first_policy()
    if A.is_singleton() and B.is_singleton():
        g = theta_coefficients(problem, traj, P0, Q0)
        return MinimaxCertificate(P0, Q0, box_minimum(g, u_hat, lo, hi), "exact", 0.0, 0, tol)

    cache: dict[bytes, list[np.ndarray]] = {}

    def coeffs(P, Q):
        key = _policy_key(P) + b"|" + _policy_key(Q)
        if key not in cache:
            cache[key] = theta_coefficients(problem, traj, P, Q)
        return cache[key]

    counts: dict[bytes, list] = {}
    g_sum = [np.zeros_like(a) for a in u_hat.levels]
    v_sum = [np.zeros_like(a) for a in u_hat.levels]
    P, Q = P0, Q0
    best_lower, best_pair, gap = -np.inf, (P0, Q0), np.inf
    for it in range(1, max_iter + 1):
        g_new = coeffs(P, Q)
        g_sum = [a + b for a, b in zip(g_sum, g_new)]
        entry = counts.setdefault(_policy_key(P) + _policy_key(Q), [0, P, Q])
        entry[0] += 1
        g_avg = [a / it for a in g_sum]
        lower = box_minimum(g_avg, u_hat, lo, hi)
        v_br = box_minimizer(g_avg, u_hat, lo, hi) - u_hat
        v_sum = [a + b for a, b in zip(v_sum, v_br.levels)]
        v_bar = ControlProcess(tuple(a / it for a in v_sum))
        z = variational_process(problem, u_hat, v_bar, traj)
        integrand = derivative_integrand(problem, traj, v_bar, z)
        P = select_measure(tree, psi, integrand)
        Q = select_measure(tree, phi4, dphi4 * z[-1])
        upper = _weighted_sum([np.ones(1)] * problem.N, coeffs(P, Q), v_bar)
        gap = max(upper - lower, 0.0)
        if lower > best_lower:
            best_lower = lower
            top = max(counts.values(), key=lambda e: e[0])
            best_pair = (top[1], top[2])
        if best_lower >= -tol or gap <= tol:
            return MinimaxCertificate(best_pair[0], best_pair[1], best_lower, "approximate", gap, it, tol)
    return MinimaxCertificate(best_pair[0], best_pair[1], best_lower, "inconclusive", gap, max_iter, tol)


# --------------------------------------------------------------------------- sufficient condition


@dataclass(frozen=True, eq=False)
class SufficiencyReport:
    passed: bool
    J_hat: float
    gaps: tuple[float, ...]
    necessary_residuals: tuple[float, ...]
    witness: ControlProcess | None = field(repr=False)
    reason: str
    tol: float

    @property
    def status(self) -> str:
        return "PASS" if self.passed else "FAIL"


def sample_controls(problem: ProblemSpec, u_hat: ControlProcess, count: int,
                    rng: np.random.Generator) -> list[ControlProcess]:
    """Admissible test controls cycling through four kinds: uniform deterministic,
    uniform adapted, local deterministic shift and local adapted noise."""
    tree = problem.tree
    lo, hi = problem.u_lo, problem.u_hi
    radius = 0.1 * (hi - lo)
    out = []
    for i in range(count):
        kind = i % 4
        if kind == 0:
            u = ControlProcess.deterministic(tree, rng.uniform(lo, hi, tree.depth))
        elif kind == 1:
            u = ControlProcess(tuple(rng.uniform(lo, hi, tree.node_count(k)) for k in range(tree.depth)))
        elif kind == 2:
            u = (u_hat + ControlProcess.deterministic(tree, rng.uniform(-radius, radius, tree.depth)))
        else:
            u = u_hat + ControlProcess(
                tuple(rng.uniform(-radius, radius, tree.node_count(k)) for k in range(tree.depth)))
        out.append(u.clip(lo, hi))
    return out


def sufficient_condition_check(problem: ProblemSpec, u_hat: ControlProcess, samples: int = 100,
                               rng_seed: int = 0, tol: float | None = None,
                               map_fn=map) -> SufficiencyReport:
    """Sampled optimality check of ``u_hat``.

    Passes when the convexity assumptions are declared, every sampled control
    costs at least ``J(u_hat) - tol``, and the necessary-condition residual
    is at least ``-tol`` in every sampled direction. ``map_fn`` may be a
    thread pool's ordered map; results do not depend on it.
    """
    traj = simulate(problem, u_hat)
    J_hat = cost(problem, u_hat, traj)
    tol = smp_tolerance(J_hat) if tol is None else tol
    smp_ready = all(getattr(problem, f) for f in ("a3_monotone", *SMP_FLAGS))
    rng = np.random.default_rng(rng_seed)
    controls = sample_controls(problem, u_hat, samples, rng)

    def evaluate(u):
        res = necessary_condition_residual(problem, u_hat, u, traj) if smp_ready else 0.0
        return cost(problem, u) - J_hat, res

    gaps, residuals = [], []
    witness, reason = None, ""
    for u, (gap, res) in zip(controls, map_fn(evaluate, controls)):
        gaps.append(gap)
        residuals.append(res)
        if witness is None and (gap < -tol or res < -tol):
            witness = u
            reason = (f"sampled control lowers the cost by {-gap:.6g}" if gap < -tol
                      else f"necessary-condition residual {res:.6g} below -tol")
    missing = [f for f in ("a3_monotone", "a4_convex", *SMP_FLAGS) if not getattr(problem, f)]
    if missing:
        reason = f"assumptions not declared: {', '.join(missing)}" + (f"; {reason}" if reason else "")
    passed = not missing and witness is None
    if passed:
        reason = f"all {samples} sampled gaps >= -{tol:.3g}"
    return SufficiencyReport(passed, J_hat, tuple(gaps), tuple(residuals), witness, reason, tol)
