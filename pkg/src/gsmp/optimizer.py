"""Projected descent on the control and the packaged linear-quadratic problem."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adjoint_smp import SMP_FLAGS, box_minimum, smp_tolerance, theta_coefficients
from .mf_gsde import ControlProcess, ProblemSpec, SimulationError, _as_nodes, cost, payoff, simulate
from .problems import Poly2, polynomial_problem
from .scenario_tree import VolatilityGrid, _fmt
from .sublinear_calculus import maximizing_set

DESCENT_CSV_HEADER = ("iter", "J", "step", "residual")


@dataclass(frozen=True)
class LQSpec:
    """``dx = (A x + B u) dt + (C x + D u) dB``."""

    A: float = 0.0
    B: float = 1.0
    C: float = 0.0
    D: float = 0.0


def lq_problem(spec: LQSpec, x0: float, T: float, N: int, grid: VolatilityGrid,
               u_lo: float = -5.0, u_hi: float = 5.0) -> ProblemSpec:
    """Linear dynamics with cost ``1/2 E^[int (x^2 + u^2) dt + x_T^2 + E^[x_T^2]]``.

    Written as ``Phi(x, y) = (x^2 + y)/2`` with ``phi_4 = x^2`` and
    ``l = (x^2 + u^2)/2``; both adjoint terminals then reduce to ``x_T``
    (``Phi_x = x`` and ``Phi_y * phi_4' = x``).
    """
    ident = Poly2.of(x=1.0)
    return polynomial_problem(
        b=Poly2.of(x=spec.A, v=spec.B), sigma=Poly2.of(x=spec.C, v=spec.D),
        Phi=Poly2.of(xx=0.5, y=0.5), l=Poly2.of(xx=0.5, vv=0.5),
        phi=(ident, ident, ident, Poly2.of(xx=1.0), ident),
        x0=x0, u_lo=u_lo, u_hi=u_hi, T=T, N=N, grid=grid, name="lq",
    )


@dataclass(frozen=True)
class ArmijoRule:
    initial: float = 1.0
    factor: float = 0.5
    c: float = 1e-4
    min_step: float = 1e-12


@dataclass(frozen=True, eq=False)
class DescentReport:
    iterates: tuple[tuple[float, float, float], ...]  # (J, step, residual)
    control: ControlProcess = field(repr=False)
    converged: bool
    message: str = ""

    @property
    def J(self) -> float:
        return self.iterates[-1][0] if self.iterates else math.nan

    @property
    def residual(self) -> float:
        return self.iterates[-1][2] if self.iterates else math.nan

    def to_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(DESCENT_CSV_HEADER)
            for i, (J, step, res) in enumerate(self.iterates):
                w.writerow([i, _fmt(J), _fmt(step), _fmt(res)])


def frozen_coefficients(problem: ProblemSpec, traj) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Supergradient coefficients for the lowest-index maximizing triple,
    with and without reach weights."""
    tree = problem.tree
    P = maximizing_set(tree, payoff(traj)).first_policy()
    xN = traj.X[-1]
    Q = maximizing_set(tree, _as_nodes(problem.phi[3](xN), len(xN))).first_policy()
    R = [maximizing_set(tree, _as_nodes(problem.phi[4](x), len(x))).first_policy() for x in traj.X]
    return (theta_coefficients(problem, traj, P, Q, R),
            theta_coefficients(problem, traj, P, Q, R, weighted=False))


def _direction(g, g_local, dt: float) -> list[np.ndarray]:
    # Nodes no selected measure reaches do not move J; steer them by their
    # own conditional slope so the worst case cannot drift onto stale controls.
    return [np.where(gk != 0, gk * 2.0**k / dt, lk / dt) for k, (gk, lk) in enumerate(zip(g, g_local))]


def descend(problem: ProblemSpec, u0: ControlProcess, max_iters: int = 500,
            step_rule: ArmijoRule | None = None, tol: float | None = None) -> DescentReport:
    """Box-projected descent along the frozen-selection supergradient.

    The residual is the smallest value of the linearized change over the box
    (a Frank-Wolfe gap, always <= 0); the run converges once it reaches
    ``-tol``. Gradients are rescaled by ``2**k / dt`` so that every node moves
    on the scale of its own Hamiltonian slope.
    """
    problem.require("a3_monotone", *SMP_FLAGS)
    rule = ArmijoRule() if step_rule is None else step_rule
    lo, hi = problem.u_lo, problem.u_hi
    u = u0.clip(lo, hi)
    try:
        traj = simulate(problem, u)
        J = cost(problem, u, traj)
    except SimulationError as exc:
        return DescentReport((), u, False, f"non-finite cost: {exc}")
    tol_ = smp_tolerance(J) if tol is None else tol
    iterates = []
    step = 0.0
    for _ in range(max_iters + 1):
        if not math.isfinite(J):
            return DescentReport(tuple(iterates), u, False, "non-finite cost")
        g, g_local = frozen_coefficients(problem, traj)
        residual = box_minimum(g, u, lo, hi)
        iterates.append((J, step, residual))
        if residual >= -tol_:
            return DescentReport(tuple(iterates), u, True, "residual within tolerance")
        if len(iterates) > max_iters:
            break
        G = _direction(g, g_local, problem.dt)
        step = rule.initial
        while step >= rule.min_step:
            cand = ControlProcess(tuple(np.clip(a - step * d, lo, hi) for a, d in zip(u.levels, G)))
            predicted = sum(float(np.dot(gk, c - a)) for gk, c, a in zip(g, cand.levels, u.levels))
            try:
                cand_traj = simulate(problem, cand)
                J_new = cost(problem, cand, cand_traj)
            except SimulationError:
                step *= rule.factor
                continue
            if J_new <= J + rule.c * predicted:
                break
            if abs(J_new - J) <= 64 * np.finfo(float).eps * (1 + abs(J)):
                # J no longer resolves the step; accept it if the slope at the
                # candidate still points along the move (no overshoot)
                g_new, _ = frozen_coefficients(problem, cand_traj)
                if sum(float(np.dot(gk, c - a)) for gk, c, a in zip(g_new, cand.levels, u.levels)) <= 0:
                    break
            step *= rule.factor
        else:
            return DescentReport(tuple(iterates), u, False, "line search failed")
        u, traj, J = cand, cand_traj, J_new
    return DescentReport(tuple(iterates), u, False, "iteration cap reached")
