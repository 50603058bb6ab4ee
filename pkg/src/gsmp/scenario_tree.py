"""Discrete quasi-sure path space for a one-dimensional G-Brownian motion.

Each time step the adversary picks a volatility ``sigma`` from a finite grid
and the increment is ``+sigma*sqrt(dt)`` or ``-sigma*sqrt(dt)`` with equal
probability. Nodes at level ``k`` are stored as flat arrays of length
``(2m)**k`` (``m`` = grid size); the children of node ``i`` occupy the slots
``i*2m + 2*j + s`` for volatility index ``j`` and sign bit ``s`` (0 = up,
1 = down). Every backward pass is therefore a reshape to ``(n_k, m, 2)``.

A :class:`Policy` fixes the volatility index at every non-terminal node and
induces a probability measure on paths. Pure policies are the extreme points
of the representing set; suprema of linear functionals over the convex hull
are attained at them, so nothing here materializes mixtures.
"""

from __future__ import annotations

import csv
import itertools
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

DEFAULT_NODE_BUDGET = 5_000_000
DEFAULT_ENUMERATION_BUDGET = 2**22

TREE_CSV_HEADER = ("level", "node_index", "parent_index", "sigma_index", "sign", "B", "QV")


class TreeSizeError(ValueError):
    """Requested tree (or enumeration) exceeds its size budget."""


class LevelMismatchError(ValueError):
    """A node field does not live on the level an operation expects."""


def node_budget() -> int:
    env = os.environ.get("GSMP_NODE_BUDGET")
    return int(env) if env else DEFAULT_NODE_BUDGET


@dataclass(frozen=True)
class VolatilityGrid:
    values: tuple[float, ...]

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        object.__setattr__(self, "values", vals)
        if not vals:
            raise ValueError("volatility grid is empty")
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("volatility grid has non-finite entries")
        if vals[0] <= 0:
            raise ValueError(f"lowest volatility must be > 0, got {vals[0]}")
        if any(b <= a for a, b in zip(vals, vals[1:])):
            raise ValueError(f"volatility grid must be strictly increasing: {vals}")

    @classmethod
    def uniform(cls, sigma_lo: float, sigma_hi: float, size: int) -> "VolatilityGrid":
        if size == 1 or sigma_lo == sigma_hi:
            return cls((sigma_lo,))
        return cls(tuple(np.linspace(sigma_lo, sigma_hi, size)))

    @property
    def sigma_lo(self) -> float:
        return self.values[0]

    @property
    def sigma_hi(self) -> float:
        return self.values[-1]

    def __len__(self) -> int:
        return len(self.values)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values)


@dataclass(frozen=True, eq=False)
class ScenarioTree:
    depth: int
    horizon: float
    grid: VolatilityGrid
    B: tuple[np.ndarray, ...] = field(repr=False)
    QV: tuple[np.ndarray, ...] = field(repr=False)
    sigma_index: tuple[np.ndarray, ...] = field(repr=False)
    sign: tuple[np.ndarray, ...] = field(repr=False)

    @property
    def dt(self) -> float:
        return self.horizon / self.depth

    @property
    def m(self) -> int:
        return len(self.grid)

    @property
    def branching(self) -> int:
        return 2 * len(self.grid)

    def node_count(self, level: int) -> int:
        return self.branching**level

    def times(self) -> np.ndarray:
        return np.arange(self.depth + 1) * self.dt

    def level_of(self, values) -> int:
        n = len(values)
        for k in range(self.depth + 1):
            if self.node_count(k) == n:
                return k
        raise LevelMismatchError(f"field of length {n} matches no level of a depth-{self.depth} tree")

    def check_level(self, values, level: int) -> np.ndarray:
        arr = np.asarray(values, dtype=float)
        if arr.shape != (self.node_count(level),):
            raise LevelMismatchError(
                f"expected {self.node_count(level)} values at level {level}, got shape {arr.shape}"
            )
        return arr

    def split(self, child_values: np.ndarray) -> np.ndarray:
        """View level-(k+1) values as ``(n_k, m, 2)``."""
        return np.asarray(child_values).reshape(-1, self.m, 2)

    def lift(self, values: np.ndarray, from_level: int, to_level: int) -> np.ndarray:
        """Broadcast a level field down to every descendant at ``to_level``."""
        if to_level < from_level:
            raise LevelMismatchError("cannot lift to a shallower level")
        return np.repeat(np.asarray(values), self.branching ** (to_level - from_level))

    def path_sum(self, fields: Sequence[np.ndarray], to_level: int | None = None) -> np.ndarray:
        """Sum of per-level fields along each path, reported at ``to_level``.

        ``fields[k]`` lives on level ``k``; missing trailing levels count as zero.
        """
        to_level = self.depth if to_level is None else to_level
        acc = np.zeros(1)
        for k in range(to_level + 1):
            if k > 0:
                acc = np.repeat(acc, self.branching)
            if k < len(fields) and fields[k] is not None:
                acc = acc + self.check_level(fields[k], k)
        return acc

    def path_max(self, fields: Sequence[np.ndarray], to_level: int | None = None) -> np.ndarray:
        to_level = self.depth if to_level is None else to_level
        acc = np.full(1, -np.inf)
        for k in range(to_level + 1):
            if k > 0:
                acc = np.repeat(acc, self.branching)
            acc = np.maximum(acc, self.check_level(fields[k], k))
        return acc

    def increments(self, level: int) -> tuple[np.ndarray, np.ndarray]:
        """Brownian and quadratic-variation increments into the children of ``level``.

        Both returned arrays have shape ``(m, 2)``.
        """
        sig = self.grid.as_array()
        sq = math.sqrt(self.dt)
        dB = np.stack([sig * sq, -sig * sq], axis=1)
        dQ = np.repeat((sig**2 * self.dt)[:, None], 2, axis=1)
        return dB, dQ

    def path_of(self, level: int, index: int) -> list[tuple[int, int]]:
        """``(sigma_index, sign)`` pairs from the root to a node."""
        steps = []
        for k in range(level, 0, -1):
            steps.append((int(self.sigma_index[k][index]), int(self.sign[k][index])))
            index //= self.branching
        return steps[::-1]

    def to_csv(self, path) -> None:
        rows = []
        for k in range(self.depth + 1):
            n = self.node_count(k)
            parent = np.arange(n) // self.branching if k else np.full(1, -1)
            for i in range(n):
                rows.append(
                    (k, i, int(parent[i]), int(self.sigma_index[k][i]), int(self.sign[k][i]),
                     _fmt(self.B[k][i]), _fmt(self.QV[k][i]))
                )
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TREE_CSV_HEADER)
            w.writerows(rows)


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def build_tree(N: int, T: float, grid: VolatilityGrid, budget: int | None = None) -> ScenarioTree:
    if N < 1:
        raise ValueError(f"tree depth must be >= 1, got N={N}")
    if not T > 0:
        raise ValueError(f"horizon must be > 0, got T={T}")
    budget = node_budget() if budget is None else budget
    width = 2 * len(grid)
    if width**N > budget:
        raise TreeSizeError(
            f"tree with N={N}, |grid|={len(grid)} has {width**N} leaves, over the node budget {budget}"
        )
    dt = T / N
    sig = grid.as_array()
    step_b = np.stack([sig, -sig], axis=1).ravel() * math.sqrt(dt)
    step_q = np.repeat(sig**2 * dt, 2)
    child_sigma = np.repeat(np.arange(len(grid)), 2)
    child_sign = np.tile(np.array([1, -1]), len(grid))

    B = [np.zeros(1)]
    QV = [np.zeros(1)]
    sidx = [np.full(1, -1)]
    sgn = [np.zeros(1, dtype=int)]
    for k in range(N):
        B.append((B[k][:, None] + step_b[None, :]).ravel())
        QV.append((QV[k][:, None] + step_q[None, :]).ravel())
        n = len(B[k])
        sidx.append(np.tile(child_sigma, n))
        sgn.append(np.tile(child_sign, n))
    return ScenarioTree(
        depth=N,
        horizon=float(T),
        grid=grid,
        B=tuple(_readonly(a) for a in B),
        QV=tuple(_readonly(a) for a in QV),
        sigma_index=tuple(_readonly(a) for a in sidx),
        sign=tuple(_readonly(a) for a in sgn),
    )


# --------------------------------------------------------------------------- policies


@dataclass(frozen=True, eq=False)
class Policy:
    """Volatility index per non-terminal node; ``choice[k]`` covers level ``k``."""

    choice: tuple[np.ndarray, ...]

    def __post_init__(self):
        arrs = tuple(_readonly(np.array(c, dtype=np.int64)) for c in self.choice)
        object.__setattr__(self, "choice", arrs)

    @classmethod
    def constant(cls, tree: ScenarioTree, index: int, up_to: int | None = None) -> "Policy":
        up_to = tree.depth if up_to is None else up_to
        if not 0 <= index < tree.m:
            raise ValueError(f"sigma index {index} outside grid of size {tree.m}")
        return cls(tuple(np.full(tree.node_count(k), index) for k in range(up_to)))

    @property
    def levels(self) -> int:
        return len(self.choice)

    def same_map(self, other: "Policy") -> bool:
        return self.levels == other.levels and all(
            np.array_equal(a, b) for a, b in zip(self.choice, other.choice)
        )

    def check(self, tree: ScenarioTree, up_to: int) -> None:
        if self.levels < up_to:
            raise LevelMismatchError(f"policy covers {self.levels} levels, need {up_to}")
        for k in range(up_to):
            c = self.choice[k]
            if c.shape != (tree.node_count(k),):
                raise LevelMismatchError(f"policy level {k} has shape {c.shape}")
            if c.size and (c.min() < 0 or c.max() >= tree.m):
                raise ValueError(f"policy level {k} has indices outside the grid")

    def as_lists(self) -> list[list[int]]:
        return [c.tolist() for c in self.choice]


def reach_probabilities(tree: ScenarioTree, P: Policy, up_to: int | None = None) -> list[np.ndarray]:
    """Probability that ``P`` visits each node, levels ``0..up_to``."""
    up_to = tree.depth if up_to is None else up_to
    P.check(tree, up_to)
    grid_idx = np.arange(tree.m)
    w = [np.ones(1)]
    for k in range(up_to):
        hit = grid_idx[None, :] == P.choice[k][:, None]
        nxt = 0.5 * w[k][:, None, None] * hit[:, :, None]
        w.append(np.broadcast_to(nxt, (len(w[k]), tree.m, 2)).reshape(-1))
    return w


def g_expectation(tree: ScenarioTree, xi) -> float:
    k = tree.level_of(xi)
    return float(conditional_g_expectation(tree, xi, 0, level=k)[0])


def conditional_g_expectation(tree: ScenarioTree, xi, j: int, level: int | None = None) -> np.ndarray:
    """Worst-case conditional expectation of a level-``k`` field, reported at level ``j``."""
    k = tree.level_of(xi) if level is None else level
    v = tree.check_level(xi, k)
    if not 0 <= j <= k:
        raise LevelMismatchError(f"conditioning level {j} must lie in [0, {k}]")
    for _ in range(k, j, -1):
        branch = tree.split(v).mean(axis=2)
        v = branch.max(axis=1)
    return v


def expectation_under_policy(tree: ScenarioTree, P: Policy, xi) -> float:
    k = tree.level_of(xi)
    w = reach_probabilities(tree, P, k)[k]
    return float(np.dot(w, tree.check_level(xi, k)))


def policy_support_size(tree: ScenarioTree, up_to: int) -> int:
    return sum(tree.node_count(k) for k in range(up_to))


def policy_from_code(tree: ScenarioTree, code: int, up_to: int) -> Policy:
    """Mixed-radix decoding: node ``n`` (levels ``0..up_to-1`` flattened) gets digit ``n``."""
    digits = []
    for k in range(up_to):
        row = np.empty(tree.node_count(k), dtype=np.int64)
        for i in range(len(row)):
            code, row[i] = divmod(code, tree.m)
        digits.append(row)
    return Policy(tuple(digits))


def _check_enumeration(tree: ScenarioTree, count: int, budget: int | None) -> None:
    budget = DEFAULT_ENUMERATION_BUDGET if budget is None else budget
    if count > budget:
        raise TreeSizeError(f"enumeration of {count} policies exceeds the budget {budget}")


def enumerate_policies(tree: ScenarioTree, up_to: int | None = None, budget: int | None = None) -> Iterator[Policy]:
    """Every adapted policy on levels ``0..up_to-1``, each exactly once."""
    up_to = tree.depth if up_to is None else up_to
    total = tree.m ** policy_support_size(tree, up_to)
    _check_enumeration(tree, total, budget)
    for code in range(total):
        yield policy_from_code(tree, code, up_to)


def enumerate_support_policies(tree: ScenarioTree, up_to: int | None = None, budget: int | None = None) -> Iterator[Policy]:
    """One policy per distinct induced path measure (off-support choices set to 0)."""
    up_to = tree.depth if up_to is None else up_to
    # reachable nodes at level k under any policy: 2**k
    total = tree.m ** sum(2**k for k in range(up_to))
    _check_enumeration(tree, total, budget)

    def extend(k: int, prefix: list[np.ndarray]) -> Iterator[Policy]:
        if k == up_to:
            yield Policy(tuple(prefix))
            return
        w = reach_probabilities(tree, Policy(tuple(prefix)), k)[k] if k else np.ones(1)
        live = np.flatnonzero(w > 0)
        for combo in itertools.product(range(tree.m), repeat=len(live)):
            row = np.zeros(tree.node_count(k), dtype=np.int64)
            row[live] = combo
            yield from extend(k + 1, prefix + [row])

    yield from extend(0, [])


def policy_blocks(tree: ScenarioTree, level: int | None = None, block: int = 1 << 15,
                  budget: int | None = None) -> Iterator[tuple[int, np.ndarray]]:
    """Vectorized sweep over all policy codes.

    Yields ``(first_code, probs)`` where ``probs[r, i]`` is the probability the
    policy with code ``first_code + r`` assigns to level-``level`` node ``i``.
    Path probabilities are built from explicit ancestor matches, independently
    of the dynamic programme.
    """
    level = tree.depth if level is None else level
    nodes = policy_support_size(tree, level)
    total = tree.m**nodes
    _check_enumeration(tree, total, budget)
    if level == 0:
        yield 0, np.ones((1, 1))
        return
    offsets = np.cumsum([0] + [tree.node_count(k) for k in range(level)])
    n_leaf = tree.node_count(level)
    leaf = np.arange(n_leaf)
    anc_pos = np.empty((n_leaf, level), dtype=np.int64)
    edge = np.empty((n_leaf, level), dtype=np.int64)
    idx = leaf.copy()
    for k in range(level, 0, -1):
        edge[:, k - 1] = tree.sigma_index[k][idx]
        idx = idx // tree.branching
        anc_pos[:, k - 1] = offsets[k - 1] + idx
    radix = tree.m ** np.arange(nodes, dtype=np.int64) if nodes < 63 else None
    for start in range(0, total, block):
        codes = np.arange(start, min(start + block, total), dtype=np.int64)
        if radix is not None:
            digits = (codes[:, None] // radix[None, :]) % tree.m
        else:  # pragma: no cover - budget forbids this
            raise TreeSizeError("policy codes overflow 64-bit integers")
        match = digits[:, anc_pos] == edge[None, :, :]
        probs = np.where(match.all(axis=2), 0.5**level, 0.0)
        yield start, probs


def tv_distance(tree: ScenarioTree, P: Policy, Q: Policy, level: int | None = None) -> float:
    level = tree.depth if level is None else level
    wp = reach_probabilities(tree, P, level)[level]
    wq = reach_probabilities(tree, Q, level)[level]
    return float(0.5 * np.abs(wp - wq).sum())
