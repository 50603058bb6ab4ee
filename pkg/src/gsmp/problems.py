"""Built-in problem families, all assembled from quadratic polynomials.

Every coefficient is a polynomial of total degree at most 2 in ``(x, y, v)``,
so derivatives are exact and the structural flags (y-independence, sign of
the mean-field slopes, convexity of the Hamiltonian) can be read off the
coefficients instead of being trusted.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

from .mf_gsde import ProblemSpec
from .scenario_tree import VolatilityGrid

TERMS = ("1", "x", "y", "v", "xx", "yy", "vv", "xy", "xv", "yv")


@dataclass(frozen=True)
class Poly2:
    """``sum c_term * monomial`` over :data:`TERMS`."""

    c: tuple[float, ...] = (0.0,) * len(TERMS)

    def __post_init__(self):
        c = tuple(float(a) for a in self.c)
        if len(c) != len(TERMS):
            raise ValueError(f"Poly2 needs {len(TERMS)} coefficients, got {len(c)}")
        object.__setattr__(self, "c", c)

    @classmethod
    def of(cls, **terms: float) -> "Poly2":
        unknown = set(terms) - set(TERMS)
        if unknown:
            raise KeyError(f"unknown polynomial terms {sorted(unknown)}; allowed {TERMS}")
        return cls(tuple(float(terms.get(t, 0.0)) for t in TERMS))

    @classmethod
    def from_mapping(cls, m: Mapping[str, float]) -> "Poly2":
        return cls.of(**{k: float(v) for k, v in m.items()})

    def __getitem__(self, term: str) -> float:
        return self.c[TERMS.index(term)]

    def __call__(self, x, y=0.0, v=0.0):
        c1, cx, cy, cv, cxx, cyy, cvv, cxy, cxv, cyv = self.c
        return (c1 + cx * x + cy * y + cv * v + cxx * x * x + cyy * y * y + cvv * v * v
                + cxy * x * y + cxv * x * v + cyv * y * v)

    def dx(self, x, y=0.0, v=0.0):
        return self["x"] + 2 * self["xx"] * x + self["xy"] * y + self["xv"] * v

    def dy(self, x, y=0.0, v=0.0):
        return self["y"] + 2 * self["yy"] * y + self["xy"] * x + self["yv"] * v

    def dv(self, x, y=0.0, v=0.0):
        return self["v"] + 2 * self["vv"] * v + self["xv"] * x + self["yv"] * y

    def uses(self, *terms: str) -> bool:
        return any(self[t] != 0.0 for t in terms)

    def y_slope_nonnegative(self) -> bool:
        """``d/dy >= 0`` everywhere, which for a quadratic means a constant non-negative slope."""
        return not self.uses("yy", "xy", "yv") and self["y"] >= 0

    def convex_in_xv(self) -> bool:
        if self.uses("xy", "yv"):
            return False
        a, c, b = 2 * self["xx"], 2 * self["vv"], self["xv"]
        return a >= 0 and c >= 0 and a * c - b * b >= 0

    def affine_in_xv(self) -> bool:
        return not self.uses("xx", "vv", "xv", "xy", "yv")


def _wrap3(p: Poly2):
    return (lambda x, y, v: p(x, y, v), lambda x, y, v: p.dx(x, y, v),
            lambda x, y, v: p.dy(x, y, v), lambda x, y, v: p.dv(x, y, v))


def polynomial_problem(*, b: Poly2, sigma: Poly2, Phi: Poly2, l: Poly2,
                       phi: tuple[Poly2, ...] | None = None, beta: Poly2 | None = None,
                       x0: float, u_lo: float, u_hi: float, T: float, N: int,
                       grid: VolatilityGrid, name: str = "custom-polynomial") -> ProblemSpec:
    """Assemble a ProblemSpec; ``phi`` maps use only their ``x`` terms,
    ``Phi`` uses ``(x, y)`` and ``l`` is time-homogeneous."""
    beta = Poly2() if beta is None else beta
    phi = tuple(Poly2.of(x=1.0) for _ in range(5)) if phi is None else tuple(phi)
    if len(phi) != 5:
        raise ValueError("need five phi polynomials")
    for p in phi:
        if p.uses("y", "v", "yy", "vv", "xy", "xv", "yv"):
            raise ValueError("phi polynomials may only depend on x")
    if Phi.uses("v", "vv", "xv", "yv"):
        raise ValueError("Phi may only depend on (x, y)")

    fb = _wrap3(b)
    fs = _wrap3(sigma)
    y_free = not b.uses("y", "yy", "xy", "yv") and not sigma.uses("y", "yy", "xy", "yv")
    beta_zero = not any(beta.c)
    a3 = Phi.y_slope_nonnegative() and l.y_slope_nonnegative()
    a3_prime = a3 and not l.uses("y", "yy", "xy", "yv") and not Phi.uses("xy")
    a4 = (b.affine_in_xv() and sigma.affine_in_xv() and Phi["xx"] >= 0 and not Phi.uses("xy")
          and l.convex_in_xv() and phi[3]["xx"] >= 0 and phi[4]["xx"] >= 0)
    return ProblemSpec(
        b=fb[0], b_x=fb[1], b_y=fb[2], b_v=fb[3],
        sigma=fs[0], sigma_x=fs[1], sigma_y=fs[2], sigma_v=fs[3],
        beta=lambda x, y, v: beta(x, y, v),
        phi=tuple((lambda x, p=p: p(x)) for p in phi),
        dphi=tuple((lambda x, p=p: p.dx(x)) for p in phi),
        Phi=lambda x, y: Phi(x, y), Phi_x=lambda x, y: Phi.dx(x, y), Phi_y=lambda x, y: Phi.dy(x, y),
        l=lambda t, x, y, v: l(x, y, v), l_x=lambda t, x, y, v: l.dx(x, y, v),
        l_y=lambda t, x, y, v: l.dy(x, y, v), l_v=lambda t, x, y, v: l.dv(x, y, v),
        x0=float(x0), u_lo=float(u_lo), u_hi=float(u_hi), T=float(T), N=int(N), grid=grid,
        y_independent_dynamics=y_free, beta_zero=beta_zero, a3_monotone=a3,
        a3_prime=a3_prime, a4_convex=a4, name=name,
    )


def additive_problem(*, a: float = 0.0, bu: float = 1.0, s: float = 1.0, x0: float = 1.0,
                     u_lo: float = -2.0, u_hi: float = 2.0, T: float = 1.0, N: int = 3,
                     grid: VolatilityGrid) -> ProblemSpec:
    """Additive noise ``dx = (a x + bu u) dt + s dB`` with quadratic costs."""
    return polynomial_problem(
        b=Poly2.of(x=a, v=bu), sigma=Poly2.of(**{"1": s}),
        Phi=Poly2.of(xx=0.5, y=0.5), l=Poly2.of(xx=0.5, vv=0.5),
        phi=(Poly2.of(x=1), Poly2.of(x=1), Poly2.of(x=1), Poly2.of(xx=1), Poly2.of(x=1)),
        x0=x0, u_lo=u_lo, u_hi=u_hi, T=T, N=N, grid=grid, name="additive",
    )


def meanfield_drift_problem(*, kappa: float = 1.0, bu: float = 1.0, c: float = 0.5, d: float = 0.0,
                            x0: float = 1.0, u_lo: float = -2.0, u_hi: float = 2.0, T: float = 1.0,
                            N: int = 3, grid: VolatilityGrid) -> ProblemSpec:
    """Drift pulled toward the worst-case mean: ``b = kappa (E^[x] - x) + bu u``, ``sigma = c x + d u``."""
    return polynomial_problem(
        b=Poly2.of(x=-kappa, y=kappa, v=bu), sigma=Poly2.of(x=c, v=d),
        Phi=Poly2.of(xx=0.5, y=0.5), l=Poly2.of(xx=0.5, vv=0.5),
        phi=(Poly2.of(x=1), Poly2.of(x=1), Poly2.of(x=1), Poly2.of(xx=1), Poly2.of(x=1)),
        x0=x0, u_lo=u_lo, u_hi=u_hi, T=T, N=N, grid=grid, name="meanfield-drift",
    )
