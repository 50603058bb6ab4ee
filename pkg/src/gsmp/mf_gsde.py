"""Controlled mean-field G-SDE on a scenario tree.

The state moves by an explicit Euler step along every edge of the tree::

    X(child) = X + b(X, rho2, u) dt + sigma(X, rho1, u) dB + beta(X, rho3, u) dQ

where ``dB = +-s*sqrt(dt)`` and ``dQ = s**2 dt`` for the edge volatility ``s``
and ``rho_i(k) = E^[phi_i(X_k)]`` is read off level ``k`` before stepping.
The cost is ``J = E^[Phi(X_N, rho4(N)) + sum_k l(t_k, X_k, rho5(k), u_k) dt]``.

All coefficient callbacks are vectorized over node arrays; the mean-field
argument ``y`` is a scalar per level.
"""

from __future__ import annotations

import csv
import functools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .scenario_tree import (
    LevelMismatchError,
    ScenarioTree,
    VolatilityGrid,
    _fmt,
    build_tree,
    g_expectation,
)
from .sublinear_calculus import restricted_sup

TRAJECTORY_CSV_HEADER = ("level", "node_index", "X", "rho1", "rho2", "rho3", "rho4", "rho5")


class CapabilityError(ValueError):
    """Operation needs a structural property the problem does not declare."""


class SimulationError(FloatingPointError):
    """The forward pass produced a non-finite state."""


class AdmissibilityError(ValueError):
    """Control leaves the control box."""


Coef = Callable[[np.ndarray, float, np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    b: Coef
    b_x: Coef
    b_y: Coef
    b_v: Coef
    sigma: Coef
    sigma_x: Coef
    sigma_y: Coef
    sigma_v: Coef
    beta: Coef
    phi: tuple[Callable, ...]
    dphi: tuple[Callable, ...]
    Phi: Callable
    Phi_x: Callable
    Phi_y: Callable
    l: Callable
    l_x: Callable
    l_y: Callable
    l_v: Callable
    x0: float
    u_lo: float
    u_hi: float
    T: float
    N: int
    grid: VolatilityGrid
    y_independent_dynamics: bool = False
    beta_zero: bool = False
    a3_monotone: bool = False
    a3_prime: bool = False
    a4_convex: bool = False
    name: str = "custom"

    def __post_init__(self):
        if len(self.phi) != 5 or len(self.dphi) != 5:
            raise ValueError("need exactly five mean-field maps phi_1..phi_5 with derivatives")
        if not (math.isfinite(self.u_lo) and math.isfinite(self.u_hi)) or self.u_lo > self.u_hi:
            raise ValueError(f"control box [{self.u_lo}, {self.u_hi}] must be bounded and non-empty")

    @functools.cached_property
    def tree(self) -> ScenarioTree:
        return build_tree(self.N, self.T, self.grid)

    @property
    def dt(self) -> float:
        return self.T / self.N

    def require(self, *flags: str) -> None:
        missing = [f for f in flags if not getattr(self, f)]
        if missing:
            raise CapabilityError(f"problem {self.name!r} does not declare {', '.join(missing)}")


def derivative_consistency(problem: ProblemSpec, rng: np.random.Generator, samples: int = 20,
                           h: float = 1e-5) -> float:
    """Largest relative gap between the derivative callbacks and central differences."""
    x = rng.uniform(-2, 2, samples)
    y = float(rng.uniform(-2, 2))
    v = rng.uniform(problem.u_lo, problem.u_hi, samples)
    t = 0.0
    worst = 0.0

    def gap(exact, fd):
        exact = np.broadcast_to(np.asarray(exact, dtype=float), fd.shape)
        return float(np.max(np.abs(exact - fd) / (1.0 + np.abs(fd))))

    for f, fx, fy, fv in ((problem.b, problem.b_x, problem.b_y, problem.b_v),
                          (problem.sigma, problem.sigma_x, problem.sigma_y, problem.sigma_v)):
        worst = max(worst, gap(fx(x, y, v), (f(x + h, y, v) - f(x - h, y, v)) / (2 * h)))
        worst = max(worst, gap(fy(x, y, v), (f(x, y + h, v) - f(x, y - h, v)) / (2 * h)))
        worst = max(worst, gap(fv(x, y, v), (f(x, y, v + h) - f(x, y, v - h)) / (2 * h)))
    for f, df in zip(problem.phi, problem.dphi):
        worst = max(worst, gap(df(x), (f(x + h) - f(x - h)) / (2 * h)))
    P = problem.Phi
    worst = max(worst, gap(problem.Phi_x(x, y), (P(x + h, y) - P(x - h, y)) / (2 * h)))
    worst = max(worst, gap(problem.Phi_y(x, y), (P(x, y + h) - P(x, y - h)) / (2 * h)))
    L = problem.l
    worst = max(worst, gap(problem.l_x(t, x, y, v), (L(t, x + h, y, v) - L(t, x - h, y, v)) / (2 * h)))
    worst = max(worst, gap(problem.l_y(t, x, y, v), (L(t, x, y + h, v) - L(t, x, y - h, v)) / (2 * h)))
    worst = max(worst, gap(problem.l_v(t, x, y, v), (L(t, x, y, v + h) - L(t, x, y, v - h)) / (2 * h)))
    return worst


# --------------------------------------------------------------------------- controls


@dataclass(frozen=True, eq=False)
class ControlProcess:
    """Control value per non-terminal node; ``levels[k]`` covers level ``k``.

    Also used for perturbation directions, which need not lie in the box.
    """

    levels: tuple[np.ndarray, ...]

    def __post_init__(self):
        arrs = []
        for a in self.levels:
            a = np.array(a, dtype=float)
            a.setflags(write=False)
            arrs.append(a)
        object.__setattr__(self, "levels", tuple(arrs))

    @classmethod
    def deterministic(cls, tree: ScenarioTree, values: Sequence[float]) -> "ControlProcess":
        if len(values) != tree.depth:
            raise LevelMismatchError(f"need {tree.depth} time-step values, got {len(values)}")
        return cls(tuple(np.full(tree.node_count(k), float(values[k])) for k in range(tree.depth)))

    @classmethod
    def constant(cls, tree: ScenarioTree, value: float) -> "ControlProcess":
        return cls.deterministic(tree, [value] * tree.depth)

    @classmethod
    def from_flat(cls, tree: ScenarioTree, flat) -> "ControlProcess":
        flat = np.asarray(flat, dtype=float)
        sizes = [tree.node_count(k) for k in range(tree.depth)]
        if flat.shape != (sum(sizes),):
            raise LevelMismatchError(f"flat control needs {sum(sizes)} entries, got {flat.shape}")
        return cls(tuple(np.split(flat, np.cumsum(sizes)[:-1])))

    def flat(self) -> np.ndarray:
        return np.concatenate(self.levels) if self.levels else np.zeros(0)

    def check(self, tree: ScenarioTree) -> None:
        if len(self.levels) != tree.depth:
            raise LevelMismatchError(f"control covers {len(self.levels)} levels, tree has {tree.depth}")
        for k, a in enumerate(self.levels):
            tree.check_level(a, k)

    def in_box(self, lo: float, hi: float, tol: float = 1e-12) -> bool:
        f = self.flat()
        return bool(np.all(f >= lo - tol) and np.all(f <= hi + tol))

    def clip(self, lo: float, hi: float) -> "ControlProcess":
        return ControlProcess(tuple(np.clip(a, lo, hi) for a in self.levels))

    def __add__(self, other: "ControlProcess") -> "ControlProcess":
        return ControlProcess(tuple(a + b for a, b in zip(self.levels, other.levels, strict=True)))

    def __sub__(self, other: "ControlProcess") -> "ControlProcess":
        return ControlProcess(tuple(a - b for a, b in zip(self.levels, other.levels, strict=True)))

    def scale(self, c: float) -> "ControlProcess":
        return ControlProcess(tuple(c * a for a in self.levels))

    def as_lists(self) -> list[list[float]]:
        return [a.tolist() for a in self.levels]


def _admissible(problem: ProblemSpec, u: ControlProcess) -> None:
    u.check(problem.tree)
    if not u.in_box(problem.u_lo, problem.u_hi):
        f = u.flat()
        bad = f[(f < problem.u_lo) | (f > problem.u_hi)][0]
        raise AdmissibilityError(
            f"control value {bad!r} outside the box [{problem.u_lo}, {problem.u_hi}]"
        )


# --------------------------------------------------------------------------- forward pass


@dataclass(frozen=True, eq=False)
class MeanFieldTrajectory:
    problem: ProblemSpec = field(repr=False)
    u: ControlProcess = field(repr=False)
    X: tuple[np.ndarray, ...] = field(repr=False)
    rho: np.ndarray = field(repr=False)  # shape (5, N+1); row i-1 holds rho_i

    def to_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRAJECTORY_CSV_HEADER)
            for k, xs in enumerate(self.X):
                r = [_fmt(v) for v in self.rho[:, k]]
                for i, x in enumerate(xs):
                    w.writerow([k, i, _fmt(x), *r])


def _rho_row(problem: ProblemSpec, tree: ScenarioTree, x: np.ndarray) -> np.ndarray:
    return np.array([g_expectation(tree, np.broadcast_to(f(x), x.shape)) for f in problem.phi])


def _as_nodes(val, n: int) -> np.ndarray:
    return np.broadcast_to(np.asarray(val, dtype=float), (n,))


def simulate(problem: ProblemSpec, u: ControlProcess) -> MeanFieldTrajectory:
    _admissible(problem, u)
    tree = problem.tree
    dt = problem.dt
    X = [np.full(1, float(problem.x0))]
    rho = np.zeros((5, tree.depth + 1))
    for k in range(tree.depth):
        x, v = X[k], u.levels[k]
        rho[:, k] = _rho_row(problem, tree, x)
        n = len(x)
        drift = _as_nodes(problem.b(x, rho[1, k], v), n) * dt
        vol = _as_nodes(problem.sigma(x, rho[0, k], v), n)
        qv = _as_nodes(problem.beta(x, rho[2, k], v), n)
        dB, dQ = tree.increments(k)
        nxt = (x + drift)[:, None, None] + vol[:, None, None] * dB + qv[:, None, None] * dQ
        nxt = nxt.reshape(-1)
        if not np.all(np.isfinite(nxt)):
            i = int(np.flatnonzero(~np.isfinite(nxt))[0])
            raise SimulationError(
                f"non-finite state at level {k + 1}, node {i}, path {tree.path_of(k + 1, i)}"
            )
        X.append(nxt)
    rho[:, tree.depth] = _rho_row(problem, tree, X[-1])
    for a in X:
        a.setflags(write=False)
    rho.setflags(write=False)
    return MeanFieldTrajectory(problem=problem, u=u, X=tuple(X), rho=rho)


def running_costs(traj: MeanFieldTrajectory) -> list[np.ndarray]:
    p = traj.problem
    times = p.tree.times()
    return [
        _as_nodes(p.l(times[k], traj.X[k], traj.rho[4, k], traj.u.levels[k]), len(traj.X[k])) * p.dt
        for k in range(p.N)
    ]


def payoff(traj: MeanFieldTrajectory) -> np.ndarray:
    """Path-accumulated cost at the leaves (the random variable whose G-expectation is J)."""
    p = traj.problem
    terminal = _as_nodes(p.Phi(traj.X[-1], traj.rho[3, -1]), len(traj.X[-1]))
    return p.tree.path_sum(running_costs(traj)) + terminal


def cost(problem: ProblemSpec, u: ControlProcess, traj: MeanFieldTrajectory | None = None) -> float:
    traj = simulate(problem, u) if traj is None else traj
    out = g_expectation(problem.tree, payoff(traj))
    if not math.isfinite(out):
        raise SimulationError("cost is not finite")
    return out


# --------------------------------------------------------------------------- first variation


def _mf_slope(tree: ScenarioTree, phi: Callable, dphi: Callable, x: np.ndarray, z: np.ndarray) -> float:
    """Right derivative of ``E^[phi(x + th*z)]`` at 0."""
    n = len(x)
    return restricted_sup(tree, _as_nodes(phi(x), n), _as_nodes(dphi(x), n) * z)


def variational_process(problem: ProblemSpec, u_hat: ControlProcess, v: ControlProcess,
                        traj: MeanFieldTrajectory | None = None) -> list[np.ndarray]:
    """First-order response ``z`` of the state to ``u_hat + th*v``, per level.

    Mean-field slopes enter through restricted sups, so ``z`` is positively
    homogeneous in ``v`` but additive only when the relevant argmax sets are
    singletons.
    """
    problem.require("beta_zero")
    traj = simulate(problem, u_hat) if traj is None else traj
    v.check(problem.tree)
    tree, dt = problem.tree, problem.dt
    z = [np.zeros(1)]
    for k in range(tree.depth):
        x, uk, vk, zk = traj.X[k], traj.u.levels[k], v.levels[k], z[k]
        n = len(x)
        y1, y2 = traj.rho[0, k], traj.rho[1, k]
        c1 = c2 = 0.0
        if not problem.y_independent_dynamics:
            c1 = _mf_slope(tree, problem.phi[0], problem.dphi[0], x, zk)
            c2 = _mf_slope(tree, problem.phi[1], problem.dphi[1], x, zk)
        drift = (_as_nodes(problem.b_x(x, y2, uk), n) * zk
                 + _as_nodes(problem.b_y(x, y2, uk), n) * c2
                 + _as_nodes(problem.b_v(x, y2, uk), n) * vk)
        vol = (_as_nodes(problem.sigma_x(x, y1, uk), n) * zk
               + _as_nodes(problem.sigma_y(x, y1, uk), n) * c1
               + _as_nodes(problem.sigma_v(x, y1, uk), n) * vk)
        dB, _ = tree.increments(k)
        nxt = (zk + drift * dt)[:, None, None] + vol[:, None, None] * dB
        z.append(nxt.reshape(-1))
    return z


def derivative_integrand(problem: ProblemSpec, traj: MeanFieldTrajectory, v: ControlProcess,
                         z: Sequence[np.ndarray]) -> np.ndarray:
    """Leaf field whose restricted sup (over maximizers of the payoff) is dJ."""
    tree, dt = problem.tree, problem.dt
    times = tree.times()
    xN, y4 = traj.X[-1], traj.rho[3, -1]
    nN = len(xN)
    c4 = _mf_slope(tree, problem.phi[3], problem.dphi[3], xN, z[-1])
    terminal = (_as_nodes(problem.Phi_x(xN, y4), nN) * z[-1]
                + _as_nodes(problem.Phi_y(xN, y4), nN) * c4)
    running = []
    for k in range(tree.depth):
        x, uk, y5 = traj.X[k], traj.u.levels[k], traj.rho[4, k]
        n = len(x)
        c5 = _mf_slope(tree, problem.phi[4], problem.dphi[4], x, z[k])
        running.append(dt * (_as_nodes(problem.l_x(times[k], x, y5, uk), n) * z[k]
                             + _as_nodes(problem.l_y(times[k], x, y5, uk), n) * c5
                             + _as_nodes(problem.l_v(times[k], x, y5, uk), n) * v.levels[k]))
    return tree.path_sum(running) + terminal


def directional_derivative(problem: ProblemSpec, u_hat: ControlProcess, v: ControlProcess,
                           traj: MeanFieldTrajectory | None = None) -> float:
    """Right derivative of ``th -> J(u_hat + th*v)`` at 0."""
    traj = simulate(problem, u_hat) if traj is None else traj
    z = variational_process(problem, u_hat, v, traj)
    return restricted_sup(problem.tree, payoff(traj), derivative_integrand(problem, traj, v, z))
