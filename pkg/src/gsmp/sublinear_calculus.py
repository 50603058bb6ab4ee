"""One-sided derivatives of the G-expectation and the objects around them.

On a finite tree ``F(lam) = E^[xi + lam*eta]`` is the maximum of finitely many
affine functions of ``lam`` (one per pure policy), so its right derivative at
0 is the best slope among the maximizing policies. That maximum is computed by
a lexicographic backward pass: first restrict every node to the volatility
indices that are optimal for ``xi`` (within ``eps_tie``), then maximize the
conditional mean of ``eta`` over what is left.

Distances between policy sets use total variation on paths. Both sets here
are pure-policy sets, which upper-bounds the distance between their convex
hulls, so a zero distance carries over.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .scenario_tree import (
    LevelMismatchError,
    Policy,
    ScenarioTree,
    enumerate_support_policies,
    expectation_under_policy,
    g_expectation,
    reach_probabilities,
)

DEFAULT_REL_TIE = 1e-9


def default_eps_tie(value: float) -> float:
    return DEFAULT_REL_TIE * (1.0 + abs(value))


def _same_level(tree: ScenarioTree, xi, eta) -> tuple[int, np.ndarray, np.ndarray]:
    k = tree.level_of(xi)
    xi = tree.check_level(xi, k)
    eta = np.asarray(eta, dtype=float)
    if eta.shape != xi.shape:
        raise LevelMismatchError(f"xi has shape {xi.shape} but eta has shape {eta.shape}")
    return k, xi, eta


@dataclass(frozen=True, eq=False)
class ArgmaxPolicySet:
    """Node-wise maximizers of a field: ``masks[k][i, j]`` is True when index
    ``j`` is optimal at level-``k`` node ``i``."""

    tree: ScenarioTree = field(repr=False)
    masks: tuple[np.ndarray, ...] = field(repr=False)
    value: float
    eps_tie: float

    @property
    def level(self) -> int:
        return len(self.masks)

    def allowed(self, k: int, i: int) -> list[int]:
        return np.flatnonzero(self.masks[k][i]).tolist()

    def contains(self, P: Policy) -> bool:
        """Support-restricted membership: only nodes P actually visits count."""
        w = reach_probabilities(self.tree, P, self.level)
        for k, mask in enumerate(self.masks):
            live = w[k] > 0
            picked = mask[np.arange(len(mask)), P.choice[k]]
            if not picked[live].all():
                return False
        return True

    def is_singleton(self) -> bool:
        """One allowed index at every node some member policy can reach."""
        reach = np.ones(1, dtype=bool)
        for k, mask in enumerate(self.masks):
            if (mask[reach].sum(axis=1) > 1).any():
                return False
            nxt = reach[:, None] & mask
            reach = np.repeat(nxt, 2, axis=1).reshape(-1)
        return True

    def first_policy(self) -> Policy:
        """Smallest allowed index at every node."""
        return Policy(tuple(np.argmax(mask, axis=1) for mask in self.masks))


def maximizing_set(tree: ScenarioTree, xi, eps_tie: float | None = None) -> ArgmaxPolicySet:
    k = tree.level_of(xi)
    v = tree.check_level(xi, k)
    if eps_tie is None:
        eps_tie = default_eps_tie(g_expectation(tree, v))
    if eps_tie < 0:
        raise ValueError(f"eps_tie must be >= 0, got {eps_tie}")
    masks = [None] * k
    for lev in range(k - 1, -1, -1):
        branch = tree.split(v).mean(axis=2)
        best = branch.max(axis=1)
        masks[lev] = branch >= best[:, None] - eps_tie
        v = best
    for mask in masks:
        mask.setflags(write=False)
    return ArgmaxPolicySet(tree=tree, masks=tuple(masks), value=float(v[0]), eps_tie=float(eps_tie))


def _restricted_pass(tree: ScenarioTree, argmax: ArgmaxPolicySet, eta: np.ndarray,
                     eps_tie: float | None = None):
    """Backward pass of eta over an argmax set; returns root value and, when
    ``eps_tie`` is given, the second-stage masks."""
    v = eta
    masks = [None] * argmax.level
    for lev in range(argmax.level - 1, -1, -1):
        branch = tree.split(v).mean(axis=2)
        branch = np.where(argmax.masks[lev], branch, -np.inf)
        best = branch.max(axis=1)
        if eps_tie is not None:
            masks[lev] = branch >= best[:, None] - eps_tie
        v = best
    return float(v[0]), masks


def restricted_sup(tree: ScenarioTree, xi, eta, eps_tie: float | None = None) -> float:
    """``max E_P[eta]`` over the policies that maximize ``E_P[xi]``."""
    _, xi, eta = _same_level(tree, xi, eta)
    return _restricted_pass(tree, maximizing_set(tree, xi, eps_tie), eta)[0]


def right_derivative(tree: ScenarioTree, xi, eta, eps_tie: float | None = None) -> float:
    return restricted_sup(tree, xi, eta, eps_tie)


def left_derivative(tree: ScenarioTree, xi, eta, eps_tie: float | None = None) -> float:
    return -restricted_sup(tree, xi, -np.asarray(eta, dtype=float), eps_tie)


def chain_rule_derivative(tree: ScenarioTree, xi, eta, phi: Callable, dphi: Callable,
                          eps_tie: float | None = None) -> tuple[float, float]:
    """One-sided derivatives of ``lam -> E^[phi(xi + lam*eta)]`` at 0."""
    _, xi, eta = _same_level(tree, xi, eta)
    base = np.asarray(phi(xi), dtype=float)
    slope = np.asarray(dphi(xi), dtype=float) * eta
    right = restricted_sup(tree, base, slope, eps_tie)
    left = -restricted_sup(tree, base, -slope, eps_tie)
    return right, left


def gamma_distance(tree: ScenarioTree, xi, eta, eps: float, eps_tie: float | None = None) -> float:
    """Largest TV distance from a maximizer of ``xi + eps*eta`` to the maximizers of ``xi``.

    For pure policies the TV distance is one minus the mass of the paths both
    follow. Given the perturbed policy, the best comparison policy copies it
    wherever that is allowed, so the worst case over perturbed maximizers
    reduces to a min-count backward pass over shared paths.
    """
    if eps < 0:
        raise ValueError(f"eps must be >= 0, got {eps}")
    k, xi, eta = _same_level(tree, xi, eta)
    if k == 0:
        return 0.0
    target = maximizing_set(tree, xi, eps_tie)
    perturbed = maximizing_set(tree, xi + eps * eta, eps_tie)
    shared = np.ones(tree.node_count(k))
    for lev in range(k - 1, -1, -1):
        pair = tree.split(shared).sum(axis=2)
        pair = np.where(target.masks[lev], pair, 0.0)
        pair = np.where(perturbed.masks[lev], pair, np.inf)
        shared = pair.min(axis=1)
    return float(max(0.0, 1.0 - shared[0] * 0.5**k))


def select_measure(tree: ScenarioTree, xi, eta, eps_tie: float | None = None) -> Policy:
    """Deterministic element of the maximizers of ``eta`` among the maximizers of ``xi``.

    Ties at both stages break toward the smallest volatility index.
    """
    _, xi, eta = _same_level(tree, xi, eta)
    first = maximizing_set(tree, xi, eps_tie)
    value, _ = _restricted_pass(tree, first, eta)
    second_tie = eps_tie if eps_tie is not None else default_eps_tie(value)
    _, masks = _restricted_pass(tree, first, eta, second_tie)
    return Policy(tuple(np.argmax(mask, axis=1) for mask in masks))


def select_measure_path(tree: ScenarioTree, xi_fields: Sequence, eta_fields: Sequence,
                        eps_tie: float | None = None) -> list[Policy]:
    """One selection per level: entry ``k`` uses the level-``k`` fields."""
    if len(xi_fields) != len(eta_fields):
        raise LevelMismatchError("xi and eta paths have different lengths")
    out = []
    for k, (xi, eta) in enumerate(zip(xi_fields, eta_fields)):
        tree.check_level(xi, k)
        out.append(select_measure(tree, xi, eta, eps_tie))
    return out


def policy_in_selection(tree: ScenarioTree, P: Policy, xi, eta, tol: float = 1e-10) -> bool:
    """Whether ``P`` attains both the max of ``xi`` and the restricted max of ``eta``."""
    return (
        abs(expectation_under_policy(tree, P, xi) - g_expectation(tree, xi)) <= tol
        and abs(expectation_under_policy(tree, P, eta) - restricted_sup(tree, xi, eta)) <= tol
    )


def locate_breakpoint(slope_at: Callable[[float], float], d: float, hi: float = 1.0,
                      rtol: float = 1e-10, floor: float = 2.0**-60, iters: int = 80) -> float:
    """Largest ``eps`` (found by halving then bisection) with ``|slope_at(eps) - d|``
    within ``rtol*(1+|d|)``.

    ``slope_at`` is a difference quotient of a piecewise-affine function, so it
    matches ``d`` exactly on an interval ``(0, eps*]``. Returns 0.0 when no
    such ``eps`` above ``floor`` exists.
    """
    tol = rtol * (1.0 + abs(d))

    def good(e):
        return abs(slope_at(e) - d) <= tol

    if good(hi):
        return hi
    lo = hi / 2
    while not good(lo):
        hi = lo
        lo /= 2
        if lo < floor:
            return 0.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if good(mid):
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * hi:
            break
    return lo


# --------------------------------------------------------------------------- Lions


@dataclass(frozen=True, eq=False)
class DiscreteLaw:
    atoms: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.atoms, dtype=float).ravel()
        w = np.asarray(self.weights, dtype=float).ravel()
        if a.shape != w.shape:
            raise ValueError("atoms and weights differ in length")
        if (w < 0).any() or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights must be non-negative and sum to 1, got sum {w.sum()!r}")
        keep = w > 0
        object.__setattr__(self, "atoms", a[keep])
        object.__setattr__(self, "weights", w[keep])

    def mean(self) -> float:
        return float(np.dot(self.weights, self.atoms))

    def integrate(self, fn: Callable) -> float:
        return float(np.dot(self.weights, fn(self.atoms)))


@dataclass(frozen=True)
class LionsFunctional:
    """A function of a law together with its Lions derivative ``df(law, y)``."""

    f: Callable[[DiscreteLaw], float]
    df: Callable[[DiscreteLaw, np.ndarray], np.ndarray]
    lipschitz: float | None = None

    def value(self, law: DiscreteLaw) -> float:
        out = float(self.f(law))
        if not np.isfinite(out):
            raise FloatingPointError("Lions functional returned a non-finite value")
        return out

    def derivative(self, law: DiscreteLaw, y) -> np.ndarray:
        out = np.asarray(self.df(law, np.asarray(y, dtype=float)), dtype=float)
        if not np.isfinite(out).all():
            raise FloatingPointError("Lions derivative returned non-finite values")
        return np.broadcast_to(out, np.shape(y))

    @classmethod
    def linear(cls, phi: Callable, dphi: Callable) -> "LionsFunctional":
        """``f(mu) = int phi dmu``; its Lions derivative is ``phi'``."""
        return cls(lambda law: law.integrate(phi), lambda law, y: dphi(y))

    @classmethod
    def squared_mean(cls) -> "LionsFunctional":
        return cls(lambda law: law.mean() ** 2, lambda law, y: np.full_like(y, 2 * law.mean()))

    @classmethod
    def variance(cls) -> "LionsFunctional":
        def f(law):
            return law.integrate(np.square) - law.mean() ** 2

        return cls(f, lambda law, y: 2 * (y - law.mean()))


def _policy_laws(tree: ScenarioTree, k: int, budget: int | None):
    for P in enumerate_support_policies(tree, k, budget):
        yield P, reach_probabilities(tree, P, k)[k]


def lions_sup(tree: ScenarioTree, xi, F: LionsFunctional, budget: int | None = None) -> float:
    """``max_P f(law of xi under P)`` over measure-distinct pure policies."""
    k = tree.level_of(xi)
    xi = tree.check_level(xi, k)
    return max(F.value(DiscreteLaw(xi, w)) for _, w in _policy_laws(tree, k, budget))


def lions_right_derivative(tree: ScenarioTree, xi, eta, F: LionsFunctional,
                           eps_tie: float | None = None, budget: int | None = None) -> float:
    k, xi, eta = _same_level(tree, xi, eta)
    rows = []
    for _, w in _policy_laws(tree, k, budget):
        law = DiscreteLaw(xi, w)
        rows.append((F.value(law), float(np.dot(w, F.derivative(law, xi) * eta))))
    vals = np.array([r[0] for r in rows])
    best = vals.max()
    tie = default_eps_tie(best) if eps_tie is None else eps_tie
    return float(max(r[1] for r in rows if r[0] >= best - tie))


def wasserstein_2(law_a: DiscreteLaw, law_b: DiscreteLaw) -> float:
    """Quantile coupling on the real line: integrate the squared gap between
    the two quantile functions over [0, 1]."""
    ia = np.argsort(law_a.atoms, kind="stable")
    ib = np.argsort(law_b.atoms, kind="stable")
    xa, ca = law_a.atoms[ia], np.cumsum(law_a.weights[ia])
    xb, cb = law_b.atoms[ib], np.cumsum(law_b.weights[ib])
    ca[-1] = cb[-1] = 1.0
    cuts = np.union1d(ca, cb)
    left = np.concatenate([[0.0], cuts[:-1]])
    mid = 0.5 * (left + cuts)
    qa = xa[np.minimum(np.searchsorted(ca, mid), len(xa) - 1)]
    qb = xb[np.minimum(np.searchsorted(cb, mid), len(xb) - 1)]
    return float(np.sqrt(np.dot(cuts - left, (qa - qb) ** 2)))
