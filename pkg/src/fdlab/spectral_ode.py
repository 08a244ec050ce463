"""Radial spectral problem

    (r^2 + d) (phi'' + (n-1)/r phi') - mu r phi' + alpha phi = 0,
    phi(0) = 1, phi'(0) = 0,

together with the closed-form comparison functions used to bracket its
solutions.

The integration runs in ``s = log r`` on the pair ``(phi, p)`` with
``p = r phi'``.  In these variables the system is smooth and non-stiff from
``r = 1e-6`` up to radii far beyond ``1e30``, which is needed because for
``alpha`` just above ``alpha_star`` the first zero escapes to astronomically
large radii.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import brentq

from .core_params import ExponentSet, ParameterError, l_of_alpha


class IntegrationError(RuntimeError):
    """The ODE integrator gave up; ``last_radius`` is the last reliable radius."""

    def __init__(self, message: str, last_radius: float):
        super().__init__(f"{message} (last reliable radius r={last_radius:.6g})")
        self.last_radius = last_radius


@dataclass(frozen=True)
class SpectralProblem:
    alpha: float
    d: float
    exps: ExponentSet

    def __post_init__(self):
        if not self.alpha > 0:
            raise ParameterError(f"alpha must be > 0, got {self.alpha}")
        if not self.d > 0:
            raise ParameterError(f"d must be > 0, got {self.d}")

    @property
    def start_radius(self) -> float:
        return 1e-6 * math.sqrt(self.d)

    def series(self, r):
        """Two-term expansion at the origin, ``(phi, phi_r)``."""
        n = self.exps.n
        phi = 1.0 - self.alpha * r * r / (2.0 * n * self.d)
        dphi = -self.alpha * r / (n * self.d)
        return phi, dphi

    def radial_laplacian(self, r, phi, dphi):
        """``phi'' + (n-1)/r phi'`` recovered algebraically from the ODE."""
        return (self.exps.mu * r * dphi - self.alpha * phi) / (r * r + self.d)

    def second_derivative(self, r, phi, dphi):
        return self.radial_laplacian(r, phi, dphi) - (self.exps.n - 1) / r * dphi


@dataclass(frozen=True)
class TailFit:
    exponent: float
    r_lo: float
    r_hi: float
    residual: float


@dataclass
class SpectralSolution:
    r_nodes: np.ndarray
    phi: np.ndarray
    dphi: np.ndarray
    first_zero: Optional[float] = None
    tail: Optional[TailFit] = None
    problem: Optional[SpectralProblem] = None
    r_max: float = math.inf
    _dense: Optional[Callable] = field(default=None, repr=False)

    @property
    def tail_exponent(self) -> Optional[float]:
        return None if self.tail is None else self.tail.exponent

    def evaluate(self, r):
        """``(phi, phi_r)`` at arbitrary radii inside the integrated range."""
        if self._dense is None or self.problem is None:
            raise ValueError("solution carries no dense output")
        r = np.asarray(r, dtype=float)
        scalar = r.ndim == 0
        r = np.atleast_1d(r)
        phi = np.empty_like(r)
        dphi = np.empty_like(r)
        r0 = self.problem.start_radius
        inner = r <= r0
        if np.any(inner):
            phi[inner], dphi[inner] = self.problem.series(r[inner])
        outer = ~inner
        if np.any(outer):
            if np.any(r[outer] > self.r_max * (1 + 1e-12)):
                raise ValueError(f"radius beyond integrated range r_max={self.r_max:.6g}")
            y = self._dense(np.log(r[outer]))
            phi[outer] = y[0]
            dphi[outer] = y[1] / r[outer]
        if scalar:
            return float(phi[0]), float(dphi[0])
        return phi, dphi

    def derivatives(self, r):
        """``(phi, phi_r, phi_rr)`` with ``phi_rr`` taken from the ODE."""
        phi, dphi = self.evaluate(r)
        return phi, dphi, self.problem.second_derivative(np.asarray(r, float), phi, dphi)


def apply_L(r, psi, psi_r, psi_rr, problem: SpectralProblem):
    """``(r^2+d)(psi_rr + (n-1)/r psi_r) - mu r psi_r`` at the given nodes."""
    r = np.asarray(r, dtype=float)
    if np.any(r <= 0):
        raise ParameterError("apply_L needs r > 0 (coordinate singularity at the origin)")
    n, mu = problem.exps.n, problem.exps.mu
    psi_r = np.asarray(psi_r, dtype=float)
    return (r * r + problem.d) * (np.asarray(psi_rr, float) + (n - 1) / r * psi_r) - mu * r * psi_r


def _rhs(problem: SpectralProblem):
    n, mu, a, d = problem.exps.n, problem.exps.mu, problem.alpha, problem.d

    def f(s, y):
        phi, p = y
        # r^2/(r^2+d) written to stay finite for huge s
        w = 1.0 / (1.0 + d * math.exp(-2.0 * s)) if s > -350 else 0.0
        return [p, -(n - 2) * p + (mu * p - a * phi) * w]

    return f


def fit_tail_exponent(r, phi, r_lo: float, r_hi: float) -> TailFit:
    """Least-squares slope of ``-log phi`` against ``log r`` on ``[r_lo, r_hi]``."""
    r = np.asarray(r, float)
    phi = np.asarray(phi, float)
    mask = (r >= r_lo * (1 - 1e-12)) & (r <= r_hi * (1 + 1e-12)) & (phi > 0)
    if mask.sum() < 3:
        raise ValueError(f"tail fit window [{r_lo:.3g}, {r_hi:.3g}] holds fewer than 3 nodes")
    x = np.log(r[mask])
    y = np.log(phi[mask])
    A = np.vstack([x, np.ones_like(x)]).T
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    return TailFit(exponent=-float(coef[0]), r_lo=float(r[mask][0]), r_hi=float(r[mask][-1]),
                   residual=float(np.sqrt(np.mean(resid ** 2))))


def integrate_phi(
    problem: SpectralProblem,
    r_max: float,
    tol: float = 1e-10,
    nodes_per_decade: int = 40,
    fit_window: Optional[tuple[float, float]] = None,
) -> SpectralSolution:
    """Integrate the spectral ODE from the origin to ``r_max`` or its first zero.

    The solution is sampled on a log-spaced grid.  Integration stops at the
    first sign change of ``phi``, located by bisection on the dense output to
    ``1e-10`` relative in ``r``.  A tail exponent is fitted over the last two
    decades (or ``fit_window``) when no zero was found.
    """
    if r_max < 10.0 * math.sqrt(problem.d):
        raise ParameterError(f"r_max must be >= 10*sqrt(d) = {10 * math.sqrt(problem.d):.6g}")
    if not 1e-12 <= tol <= 1e-4:
        raise ParameterError(f"tol must lie in [1e-12, 1e-4], got {tol}")

    r0 = problem.start_radius
    s0, s1 = math.log(r0), math.log(r_max)
    phi0, dphi0 = problem.series(r0)

    def crossing(s, y):
        return y[0]

    crossing.terminal = True
    crossing.direction = -1

    sol = solve_ivp(
        _rhs(problem), (s0, s1), [phi0, r0 * dphi0], method="DOP853",
        rtol=tol, atol=1e-300, events=crossing, dense_output=True,
    )
    if sol.status == -1:
        raise IntegrationError(sol.message, float(math.exp(sol.t[-1])))

    first_zero = None
    s_end = s1
    if sol.t_events[0].size:
        s_hit = float(sol.t_events[0][0])
        # bracket on the dense output, then refine in r
        lo, hi = s_hit - 1e-3, s_hit + 1e-3
        if sol.sol(lo)[0] > 0 and sol.sol(hi)[0] <= 0:
            s_hit = brentq(lambda s: sol.sol(s)[0], lo, hi, xtol=1e-13, rtol=1e-15)
        first_zero = math.exp(s_hit)
        s_end = s_hit

    n_nodes = max(int(math.ceil((s_end - s0) / math.log(10.0) * nodes_per_decade)) + 1, 8)
    s_nodes = np.linspace(s0, s_end, n_nodes)
    y = sol.sol(s_nodes)
    r_nodes = np.exp(s_nodes)
    phi = y[0].copy()
    dphi = y[1] / r_nodes
    if first_zero is not None:
        phi[-1] = 0.0

    tail = None
    if first_zero is None:
        lo, hi = fit_window if fit_window is not None else (r_max / 100.0, r_max)
        if hi <= r_max * (1 + 1e-12) and lo > 10.0 * r0:
            tail = fit_tail_exponent(r_nodes, phi, lo, hi)

    return SpectralSolution(
        r_nodes=r_nodes, phi=phi, dphi=dphi, first_zero=first_zero, tail=tail,
        problem=problem, r_max=math.exp(s_end), _dense=sol.sol,
    )


def ode_defect(sol: SpectralSolution, r, h: float = 1e-3):
    """Scaled residual of the ODE along the dense output at radii ``r``.

    ``phi_rr`` is obtained by a fourth-order centred difference of the
    interpolated ``phi_r`` in ``log r``; the residual is divided by the largest
    of its additive terms.
    """
    p = sol.problem
    r = np.asarray(r, float)
    s = np.log(r)

    phi, dphi = sol.evaluate(r)
    phi_rr = _dphi_s(sol, s, h) / r
    n, mu = p.exps.n, p.exps.mu
    terms = np.vstack([
        (r * r + p.d) * phi_rr,
        (r * r + p.d) * (n - 1) / r * dphi,
        -mu * r * dphi,
        p.alpha * phi,
    ])
    return terms.sum(axis=0) / np.abs(terms).max(axis=0)


def selfadjoint_defect(sol: SpectralSolution, r, h: float = 1e-3):
    """Defect of ``(rho phi_r)_r + alpha rho phi / (r^2+d)``, rescaled by ``(r^2+d)/rho``.

    ``rho = r^(n-1) (r^2+d)^(-mu/2)``.  After rescaling it is directly
    comparable with the unscaled direct-form residual.
    """
    p = sol.problem
    n, mu, d = p.exps.n, p.exps.mu, p.d
    r = np.asarray(r, float)
    s = np.log(r)

    def flux(ss):
        rr = np.exp(ss)
        rho = rr ** (n - 1) * (rr * rr + d) ** (-mu / 2)
        return rho * sol._dense(ss)[1] / rr

    flux_s = (-flux(s + 2 * h) + 8 * flux(s + h) - 8 * flux(s - h) + flux(s - 2 * h)) / (12 * h)
    rho = r ** (n - 1) * (r * r + d) ** (-mu / 2)
    phi, _ = sol.evaluate(r)
    defect = flux_s / r + p.alpha * rho * phi / (r * r + d)
    return defect * (r * r + d) / rho


def _dphi_s(sol: SpectralSolution, s, h: float):
    """Fourth-order centred derivative of the interpolated ``phi_r`` in ``log r``."""
    def dphi_at(ss):
        return sol._dense(ss)[1] / np.exp(ss)

    return (-dphi_at(s + 2 * h) + 8 * dphi_at(s + h) - 8 * dphi_at(s - h) + dphi_at(s - 2 * h)) / (12 * h)


def direct_defect(sol: SpectralSolution, r, h: float = 1e-3):
    """Unscaled direct-form residual, same finite-difference recipe as :func:`ode_defect`."""
    p = sol.problem
    r = np.asarray(r, float)
    phi, dphi = sol.evaluate(r)
    n, mu = p.exps.n, p.exps.mu
    phi_rr = _dphi_s(sol, np.log(r), h) / r
    return (r * r + p.d) * (phi_rr + (n - 1) / r * dphi) - mu * r * dphi + p.alpha * phi


@dataclass
class Lemma23Report:
    violations: dict[str, np.ndarray]
    n_nodes: int

    @property
    def ok(self) -> bool:
        return all(v.size == 0 for v in self.violations.values())

    @property
    def total(self) -> int:
        return int(sum(v.size for v in self.violations.values()))


def check_lemma23(sol: SpectralSolution, problem: SpectralProblem, tol: float = 1e-8) -> Lemma23Report:
    """Check positivity, monotonicity, the sign of the radial Laplacian and the
    two-sided log-derivative bound at every node with ``r > 0``.

    Returns the indices of violating nodes per property; a violation is a wrong
    sign beyond ``tol`` relative to the size of the compared quantities.
    """
    if not 0 < problem.alpha < problem.exps.alpha_star:
        raise ParameterError("positivity properties are stated for alpha in (0, alpha_star)")
    r = np.asarray(sol.r_nodes, float)
    keep = r > 0
    idx = np.nonzero(keep)[0]
    r = r[keep]
    phi = np.asarray(sol.phi, float)[keep]
    dphi = np.asarray(sol.dphi, float)[keep]
    k = l_of_alpha(problem.alpha, problem.exps) - problem.exps.mu - 2.0

    lap = problem.radial_laplacian(r, phi, dphi)
    lap_scale = (problem.exps.mu * r * np.abs(dphi) + problem.alpha * np.abs(phi)) / (r * r + problem.d)
    lower = -k * r / (r * r + problem.d) * phi  # bound (iii) multiplied through by phi > 0
    out = {
        "positivity": idx[phi <= 0],
        "monotonicity": idx[dphi > tol * np.abs(phi)],
        "laplacian_sign": idx[lap >= tol * lap_scale],
        "logderiv_lower": idx[dphi < lower - tol * np.maximum(np.abs(lower), np.abs(dphi))],
    }
    return Lemma23Report(violations=out, n_nodes=int(r.size))


# --- comparison functions ---------------------------------------------------


@dataclass(frozen=True)
class ComparisonFunction:
    kind: str  # "W_minus" | "W_plus" | "W_star"
    k: float
    d: float = 0.0
    j: Optional[float] = None

    def derivatives(self, r):
        r = np.asarray(r, float)
        k = self.k
        if self.kind == "W_minus":
            q = r * r + self.d
            w = q ** (-k / 2)
            w_r = -k * r * q ** (-k / 2 - 1)
            w_rr = k * (k + 2) * r * r * q ** (-k / 2 - 2) - k * q ** (-k / 2 - 1)
            return w, w_r, w_rr
        if self.kind == "W_star":
            return r ** (-k), -k * r ** (-k - 1), k * (k + 1) * r ** (-k - 2)
        if self.kind == "W_plus":
            j = self.j
            w = r ** (-k) - r ** (-j)
            w_r = -k * r ** (-k - 1) + j * r ** (-j - 1)
            w_rr = k * (k + 1) * r ** (-k - 2) - j * (j + 1) * r ** (-j - 2)
            return w, w_r, w_rr
        raise ValueError(f"unknown comparison function kind {self.kind!r}")

    def value(self, r):
        return self.derivatives(r)[0]


def make_comparison(kind: str, problem: SpectralProblem, upper_alpha: Optional[float] = None) -> ComparisonFunction:
    """Build ``W_minus``, ``W_plus`` or ``W_star`` for the given problem.

    ``W_plus`` needs a second rate ``upper_alpha > alpha``; by default it is
    ``alpha + 0.05 (alpha_star - alpha)``.
    """
    e = problem.exps
    if kind == "W_star":
        return ComparisonFunction("W_star", k=(e.n - e.mu - 2.0) / 2.0)
    if not problem.alpha <= e.alpha_star:
        raise ParameterError("comparison functions need alpha <= alpha_star")
    k = l_of_alpha(problem.alpha, e) - e.mu - 2.0
    if kind == "W_minus":
        return ComparisonFunction("W_minus", k=k, d=problem.d)
    if kind == "W_plus":
        if problem.alpha >= e.alpha_star:
            raise ParameterError("W_plus needs alpha < alpha_star")
        if upper_alpha is None:
            upper_alpha = problem.alpha + 0.05 * (e.alpha_star - problem.alpha)
        if not problem.alpha < upper_alpha <= e.alpha_star:
            raise ParameterError("W_plus needs alpha < upper_alpha <= alpha_star")
        j = l_of_alpha(upper_alpha, e) - e.mu - 2.0
        if j >= k + 2:
            raise ParameterError(f"W_plus needs j < k+2, got j={j:.6g}, k={k:.6g}")
        return ComparisonFunction("W_plus", k=k, j=j)
    raise ValueError(f"unknown comparison function kind {kind!r}")


@dataclass
class ResidualField:
    r: np.ndarray
    residual: np.ndarray
    positive_from: Optional[float]


def comparison_residuals(f: ComparisonFunction, problem: SpectralProblem, radii) -> ResidualField:
    """Signed field ``L W + alpha W`` on ``radii``.

    ``positive_from`` is the smallest node radius from which the residual stays
    positive up to the last node (the crossover radius for ``W_plus``).
    """
    if f.kind == "W_plus" and f.j is not None and f.j >= f.k + 2:
        raise ParameterError("W_plus needs j < k+2")
    r = np.asarray(radii, float)
    w, w_r, w_rr = f.derivatives(r)
    res = apply_L(r, w, w_r, w_rr, problem) + problem.alpha * w
    positive_from = None
    neg = np.nonzero(res <= 0)[0]
    if neg.size == 0:
        positive_from = float(r[0])
    elif neg[-1] + 1 < r.size:
        positive_from = float(r[neg[-1] + 1])
    return ResidualField(r=r, residual=res, positive_from=positive_from)
