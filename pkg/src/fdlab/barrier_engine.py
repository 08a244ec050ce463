"""Parabolic operator, its reduced form on barrier families, and grid certificates.

For ``w = (r^2 + D + y(t) psi(r))^(-mu/2)`` the operator

    P w = w_t - ((w^(m-1) w_r)_r + (n-1)/r w^(m-1) w_r) - mu r w_r - mu n w

factors as ``(mu/2) y z^(-(mu+2)/2) A_D[y] psi`` with ``z = r^2 + D + y psi``
(see :func:`A_D_residual`).  A certificate evaluates the sign of ``y * A_D``
on a space-time grid restricted to the set where the smooth branch of a
clamped barrier is active.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.optimize import minimize_scalar

from .core_params import ExponentSet, ParameterError, barenblatt, derive_exponents, l_of_alpha, rate_of_l
from .spectral_ode import SpectralProblem, SpectralSolution, integrate_phi

SIGN_TOL = 1e-10
SAFETY = 1.1

LEMMA_IDS = ("L3.1", "L3.2", "L3.3", "L3.4", "L3.5", "L4.1", "L4.2", "T1.2-upper", "T1.2-lower")


class PredicateError(ParameterError):
    """A lemma's parameter condition does not hold."""


class GridError(ParameterError):
    pass


# --- shapes -----------------------------------------------------------------


@dataclass(frozen=True)
class PowerLaw:
    """``psi(r) = r^(-k)``."""

    k: float

    def derivatives(self, r):
        r = np.asarray(r, float)
        k = self.k
        return r ** (-k), -k * r ** (-k - 1), k * (k + 1) * r ** (-k - 2)


@dataclass(frozen=True)
class SpectralShape:
    """``psi = phi^d`` with ``phi_rr`` recovered from the ODE."""

    solution: SpectralSolution

    def derivatives(self, r):
        return self.solution.derivatives(r)


@dataclass(frozen=True)
class FunctionShape:
    """Arbitrary shape from a callable returning ``(psi, psi_r, psi_rr)``."""

    fn: Callable

    def derivatives(self, r):
        return self.fn(np.asarray(r, float))


# --- operators --------------------------------------------------------------


def apply_P(w, w_t, r, t, exps: ExponentSet, h: float = 1e-3):
    """Pointwise ``P w`` with centred differences of step ``h`` in ``r``.

    ``w(r, t)`` and ``w_t(r, t)`` are vectorised callables; ``r`` and ``t``
    broadcast against each other.
    """
    r = np.asarray(r, float)
    t = np.asarray(t, float)
    if np.any(r <= 0):
        raise ParameterError("apply_P needs r > 0")
    if np.any(r - h <= 0):
        raise ParameterError("difference stencil reaches r <= 0; reduce h")
    w0 = np.asarray(w(r, t), float)
    wp = np.asarray(w(r + h, t), float)
    wm = np.asarray(w(r - h, t), float)
    if not (np.all(np.isfinite(w0)) and np.all(np.isfinite(wp)) and np.all(np.isfinite(wm))):
        raise ParameterError("apply_P needs finite w on the stencil")
    if np.any(w0 <= 0) or np.any(wp <= 0) or np.any(wm <= 0):
        raise ParameterError("apply_P needs w > 0 on the stencil")
    m, n, mu = exps.m, exps.n, exps.mu
    w_r = (wp - wm) / (2 * h)
    w_rr = (wp - 2 * w0 + wm) / (h * h)
    flux_r = w0 ** (m - 1) * w_rr + (m - 1) * w0 ** (m - 2) * w_r * w_r
    diffusion = flux_r + (n - 1) / r * w0 ** (m - 1) * w_r
    return np.asarray(w_t(r, t), float) - diffusion - mu * r * w_r - mu * n * w0


def A_D_terms(y, y_prime, psi, psi_r, psi_rr, r, D: float, exps: ExponentSet):
    """Additive terms of ``A_D[y] psi`` stacked along axis 0."""
    y = np.asarray(y, float)
    if np.any(y == 0):
        raise ParameterError("A_D needs y != 0 (y'/y undefined); use apply_P directly")
    r = np.asarray(r, float)
    if np.any(r <= 0):
        raise ParameterError("A_D needs r > 0")
    n, mu = exps.n, exps.mu
    lap = psi_rr + (n - 1) / r * psi_r
    ratio = np.asarray(y_prime, float) / y
    return np.stack(np.broadcast_arrays(
        (r * r + D) * lap,
        -mu * r * psi_r,
        -ratio * psi,
        y * psi * lap,
        -y * (mu / 2) * psi_r * psi_r,
    ))


def A_D_residual(y, y_prime, psi, psi_r, psi_rr, r, D: float, exps: ExponentSet):
    """Reduced operator

        (r^2+D)(psi_rr + (n-1)/r psi_r) - mu r psi_r - (y'/y) psi
            - y { -psi (psi_rr + (n-1)/r psi_r) + (mu/2) psi_r^2 }
    """
    return A_D_terms(y, y_prime, psi, psi_r, psi_rr, r, D, exps).sum(axis=0)


def identity_rhs(y, y_prime, psi, psi_r, psi_rr, r, D: float, exps: ExponentSet):
    """Right side ``(mu/2) y z^(-(mu+2)/2) A_D[y] psi`` of the factorisation."""
    r = np.asarray(r, float)
    z = r * r + D + y * psi
    mu = exps.mu
    return mu / 2 * y * z ** (-(mu + 2) / 2) * A_D_residual(y, y_prime, psi, psi_r, psi_rr, r, D, exps)


# --- barrier families ---------------------------------------------------------


@dataclass
class BarrierSpec:
    """``w = clamp(V_c, (r^2 + D + y(t) psi)^(-mu/2))`` with ``y(t) = amp * exp(-rate t)``.

    ``clamp`` is ``None``, ``("min", c)`` or ``("max", c)``; ``role`` is
    ``"super"`` (``P w >= 0``) or ``"sub"`` (``P w <= 0``).
    """

    role: str
    D: float
    shape: object
    amp: float
    rate: float
    exps: ExponentSet
    clamp: Optional[tuple[str, float]] = None
    r_range: tuple[float, float] = (0.0, math.inf)
    t_range: tuple[float, float] = (0.0, math.inf)

    def y(self, t):
        return self.amp * np.exp(-self.rate * np.asarray(t, float))

    def y_prime(self, t):
        return -self.rate * self.y(t)

    def z(self, r, t):
        r = np.asarray(r, float)
        psi = self.shape.derivatives(r)[0]
        return r * r + self.D + self.y(t) * psi

    def branch(self, r, t):
        z = self.z(r, t)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(z > 0, np.abs(z) ** (-self.exps.mu / 2), np.inf)

    def branch_t(self, r, t):
        z = self.z(r, t)
        psi = self.shape.derivatives(np.asarray(r, float))[0]
        return -self.exps.mu / 2 * z ** (-(self.exps.mu + 2) / 2) * self.y_prime(t) * psi

    def value(self, r, t):
        b = self.branch(r, t)
        if self.clamp is None:
            return b
        kind, c = self.clamp
        vc = barenblatt(c, r, self.exps)
        return np.minimum(vc, b) if kind == "min" else np.maximum(vc, b)

    def active(self, r, t):
        """Mask of nodes where the smooth branch is the selected one."""
        z = self.z(r, t)
        r = np.asarray(r, float)
        if self.clamp is None:
            return z > 0
        kind, c = self.clamp
        zc = r * r + c
        if kind == "min":
            return (z > 0) & (z > zc)
        return (z > 0) & (z < zc)


# --- certificates -------------------------------------------------------------


@dataclass
class CertGrid:
    r: np.ndarray
    t: np.ndarray

    def describe(self) -> str:
        return (f"r=[{self.r[0]:.6g},{self.r[-1]:.6g}]x{self.r.size} "
                f"t=[{self.t[0]:.6g},{self.t[-1]:.6g}]x{self.t.size}")


@dataclass
class CertificateReport:
    lemma: str
    grid: str
    margin: float
    violations: list = field(default_factory=list)
    predicates: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    n_active: int = 0
    n_clamped: int = 0
    interface_ok: bool = True

    @property
    def passed(self) -> bool:
        return (not self.violations and self.interface_ok
                and all(ok for ok, _ in self.predicates.values()))

    def failed_predicates(self) -> list[str]:
        return [name for name, (ok, _) in self.predicates.items() if not ok]


def default_grid(r_lo: float, r_hi: float, t_lo: float, t_hi: float, nr: int = 1200, nt: int = 41) -> CertGrid:
    return CertGrid(r=np.geomspace(r_lo, r_hi, nr), t=np.linspace(t_lo, t_hi, nt))


def _spectral(alpha: float, d: float, exps: ExponentSet, r_max: float) -> SpectralSolution:
    return integrate_phi(SpectralProblem(alpha, d, exps), max(r_max * 1.01, 10 * math.sqrt(d)), tol=1e-11)


def _sup_ratio(fn, lo: float, hi: float, n: int = 400) -> float:
    """Grid maximum of ``fn`` on ``[lo, hi]`` refined by bounded scalar search."""
    r = np.geomspace(lo, hi, n)
    vals = fn(r)
    i = int(np.argmax(vals))
    a, b = r[max(i - 1, 0)], r[min(i + 1, n - 1)]
    best = float(vals[i])
    if b > a:
        res = minimize_scalar(lambda x: -float(fn(np.array([x]))[0]), bounds=(a, b), method="bounded",
                              options={"xatol": 1e-10 * b})
        best = max(best, -float(res.fun))
    return best


def _inf_value(fn, lo: float, hi: float, n: int = 400) -> float:
    return -_sup_ratio(lambda r: -fn(r), lo, hi, n)


def compute_c1(sol: SpectralSolution, r0: Optional[float] = None) -> float:
    """Infimum of ``-(phi_rr + (n-1)/r phi_r)`` on ``(0, r0)``."""
    p = sol.problem
    r0 = sol.first_zero if r0 is None else r0
    lo = p.start_radius * 10

    def neg_lap(r):
        phi, dphi = sol.evaluate(r)
        return -p.radial_laplacian(r, phi, dphi)

    return _inf_value(neg_lap, lo, r0 * (1 - 1e-9), 800)


def compute_c2(sol, c1: float, r0: Optional[float] = None, n: Optional[int] = None, mu: Optional[float] = None) -> float:
    """``c1 / sup_{(0,r0)} { phi |phi_rr + (n-1)/r phi_r| + (mu/2) phi_r^2 }``.

    ``sol`` is a :class:`SpectralSolution` (Laplacian from the ODE) or any
    object with ``derivatives(r) -> (phi, phi_r, phi_rr)``; in the latter case
    ``r0``, ``n`` and ``mu`` must be supplied.
    """
    if not c1 > 0:
        raise ParameterError(f"c1 must be > 0, got {c1}")
    if isinstance(sol, SpectralSolution):
        r0 = sol.first_zero if r0 is None else r0
        n = sol.problem.exps.n
        mu = sol.problem.exps.mu
        lo = sol.problem.start_radius * 10
    else:
        lo = 1e-6
    if r0 is None or n is None or mu is None:
        raise ParameterError("compute_c2 needs r0, n and mu for a generic shape")

    def quantity(r):
        phi, dphi, phi_rr = sol.derivatives(r)
        lap = phi_rr + (n - 1) / r * dphi
        return phi * np.abs(lap) + mu / 2 * dphi * dphi

    sup = _sup_ratio(quantity, lo, r0 * (1 - 1e-9), 800)
    if not sup > 0:
        raise ParameterError("sup of phi|lap phi| + (mu/2) phi_r^2 vanishes; c2 undefined")
    return c1 / sup


def _certify_spec(lemma: str, spec: BarrierSpec, grid: CertGrid, predicates: dict, params: dict) -> CertificateReport:
    r = np.asarray(grid.r, float)
    t = np.asarray(grid.t, float)
    lo, hi = spec.r_range
    r = r[(r > lo) & (r < hi)]
    t = t[(t >= spec.t_range[0]) & (t <= spec.t_range[1])]
    if r.size < 1000:
        raise GridError(f"certificate grid needs >= 1000 space nodes inside the region, got {r.size}")
    if t.size < 20:
        raise GridError(f"certificate grid needs >= 20 time samples, got {t.size}")

    psi, psi_r, psi_rr = spec.shape.derivatives(r)
    R = r[None, :]
    T = t[:, None]
    y = spec.y(T)
    yp = spec.y_prime(T)
    terms = A_D_terms(y, yp, psi[None, :], psi_r[None, :], psi_rr[None, :], R, spec.D, spec.exps)
    A = terms.sum(axis=0)
    scale = np.abs(terms).max(axis=0)
    role = 1.0 if spec.role == "super" else -1.0
    signed = role * np.sign(y) * A  # P w = (mu/2) y z^(..) A must have the role's sign
    mask = spec.active(R, T)
    with np.errstate(divide="ignore", invalid="ignore"):
        margin_field = np.where(scale > 0, signed / scale, 0.0)
    bad = mask & (signed < -SIGN_TOL * scale)
    ti, ri = np.nonzero(bad)
    order = np.argsort(margin_field[ti, ri])
    violations = [(float(r[ri[k]]), float(t[ti[k]]), float(A[ti[k], ri[k]])) for k in order]
    margin = float(margin_field[mask].min()) if mask.any() else math.inf

    interface_ok = True
    if spec.clamp is not None:
        kind, c = spec.clamp
        vc = barenblatt(c, R, spec.exps)
        val = spec.value(R, T)
        interface_ok = bool(np.all(val <= vc * (1 + 1e-14)) if kind == "min" else np.all(val >= vc * (1 - 1e-14)))

    return CertificateReport(
        lemma=lemma, grid=CertGrid(r, t).describe(), margin=margin, violations=violations,
        predicates=predicates, params=params, n_active=int(mask.sum()),
        n_clamped=int(mask.size - mask.sum()), interface_ok=interface_ok,
    )


def build_barrier(lemma: str, params: dict, r_max: float = 1e3) -> tuple[BarrierSpec, dict, dict]:
    """Construct the barrier of ``lemma`` with constructive constants.

    Returns ``(spec, predicates, echoed_params)``; ``predicates`` maps the
    inequality label to ``(holds, detail)``.
    """
    if lemma not in LEMMA_IDS:
        raise ParameterError(f"unknown lemma id {lemma!r}; expected one of {', '.join(LEMMA_IDS)}")
    p = dict(params)
    exps = p.get("exps") or derive_exponents(int(p.get("n", 6)), p.get("m", 0))
    n, mu = exps.n, exps.mu
    D = float(p.get("D", 1.0))
    if not D > 0:
        raise ParameterError("D must be > 0")
    preds: dict[str, tuple[bool, str]] = {}
    echo: dict[str, float] = {"n": n, "m": exps.m, "D": D}

    if lemma in ("L3.1", "L3.2", "L3.3"):
        delta = float(p.get("delta", D / 2))
        if not 0 < delta < D:
            raise ParameterError(f"need 0 < delta < D, got delta={delta}, D={D}")
        l = float(p.get("l", exps.l_star - 0.5 * (exps.l_star - mu - 2)))
        c = float(p.get("c", 0.5))
        if lemma == "L3.3":
            alpha = rate_of_l(l, exps)
            k = l - mu - 2
            need = mu * (D - delta) * k * k / (2 * delta) - alpha
            kappa = float(p.get("kappa", max(SAFETY * need, 0.1 * alpha) if need > 0 else 0.1 * alpha))
            eta = -kappa
            preds["(30.3)"] = (kappa >= need, f"kappa={kappa:.6g} >= {need:.6g}")
            echo.update(l=l, alpha=alpha, kappa=kappa)
        else:
            q = delta / (mu * (D - delta))
            l0_max = (mu + 2 + q * n) / (1 + q)
            if "alpha" in p:
                alpha = float(p["alpha"])
                l0 = l_of_alpha(alpha, exps)
            else:
                l0 = float(p.get("l0", min(l, l0_max, exps.l_star - 1e-9)))
                alpha = rate_of_l(l0, exps)
            k = l0 - mu - 2
            eta = float(p.get("eta", alpha / 2 if lemma == "L3.1" else alpha / 4))
            bound = alpha - mu * (D - delta) / (2 * delta) * k * k
            preds["(27.3)"] = ((l0 - mu - 2) / (n - l0) <= q * (1 + 1e-12), f"(l0-mu-2)/(n-l0)={(l0 - mu - 2) / (n - l0):.6g} <= {q:.6g}")
            preds["(36.2)"] = (eta <= bound * (1 + 1e-12) + 1e-15, f"eta={eta:.6g} <= {bound:.6g}")
            if lemma == "L3.2":
                preds["eta in (0, alpha/2)"] = (0 < eta < alpha / 2, f"eta={eta:.6g}, alpha/2={alpha / 2:.6g}")
            echo.update(l=l, l0=l0, alpha=alpha, eta=eta)
        sol = _spectral(alpha, delta, exps, r_max)
        if "B" in p:
            B = float(p["B"])
        else:
            # data bound: v0 <= V_delta for r < 1, v0 <= V_D + c r^-l for r >= 1
            phi1 = sol.evaluate(1.0)[0]
            tail = _sup_ratio(lambda r: (2 * c / mu) * (r * r + D) ** ((mu + 2) / 2) * r ** (-l) / sol.evaluate(r)[0],
                              1.0, r_max)
            B = SAFETY * max((D - delta) / phi1, tail)
        echo.update(delta=delta, c=c, B=B)
        spec = BarrierSpec("super", D, SpectralShape(sol), -B, eta, exps, clamp=("min", delta), r_range=(0, r_max))
        return spec, preds, echo

    if lemma == "L3.4":
        l = float(p.get("l", 4.5 if n == 6 and mu == 2 else (mu + 2 + exps.l_star) / 2))
        alpha = rate_of_l(l, exps)
        k = l - mu - 2
        bound = (n + mu - l) * D / (n + mu - l + mu / 2 * k)
        delta = float(p.get("delta", 0.9 * bound))
        t0 = float(p.get("t0", 0.0))
        c1 = float(p.get("c1", p.get("c", 0.5)))
        B = float(p.get("B", SAFETY * max(math.exp(alpha * t0) * (D + 1),
                                         2 * c1 / mu * math.exp(alpha * t0) * (D + 1) ** ((mu + 2) / 2))))
        preds["(31.4)"] = (delta < bound, f"delta={delta:.6g} < {bound:.6g}")
        preds["(31.7)"] = (B >= math.exp(alpha * t0) * (D + 1), f"B={B:.6g}")
        preds["(31.8)"] = (B >= 2 * c1 / mu * math.exp(alpha * t0) * (D + 1) ** ((mu + 2) / 2), f"B={B:.6g}")
        if not 0 < delta < D:
            raise ParameterError(f"need 0 < delta < D, got delta={delta}")
        echo.update(l=l, alpha=alpha, delta=delta, t0=t0, c1=c1, B=B)
        spec = BarrierSpec("super", D, PowerLaw(k), -B, alpha, exps, clamp=("min", D - delta),
                           r_range=(0, r_max), t_range=(t0, math.inf))
        return spec, preds, echo

    if lemma == "L3.5":
        l = float(p.get("l", (mu + 2 + exps.l_star) / 2))
        alpha = rate_of_l(l, exps)
        k = l - mu - 2
        c = float(p.get("c", 0.5))
        sol = _spectral(alpha, D, exps, r_max)
        rr = np.geomspace(1.0, r_max, 4000)
        ok = c * rr ** (-l) <= 0.5 * barenblatt(D, rr, exps)
        bad = np.nonzero(~ok)[0]
        r0 = float(rr[bad[-1] + 1]) if bad.size else 1.0
        c1 = _inf_value(lambda r: sol.evaluate(r)[0] * r ** k, r0, r_max) / SAFETY
        c2 = float(p.get("c2", 0.5 * barenblatt(D, r0, exps)))
        c3 = 2 * (2 ** (2 / mu) - 1)
        gamma = c * c3
        b_small = 1 / (c2 ** (2 / mu) * sol.evaluate(r0)[0])
        b_tail = gamma * (D + 1) ** ((mu + 2) / 2) / c1
        B = float(p.get("B", SAFETY * max(b_small, b_tail)))
        preds["(33.7)"] = (B >= b_small, f"B={B:.6g} >= {b_small:.6g}")
        preds["(33.8)"] = (B >= b_tail, f"B={B:.6g} >= {b_tail:.6g}")
        echo.update(l=l, alpha=alpha, c=c, r0=r0, c1=c1, c2=c2, c3=c3, B=B)
        spec = BarrierSpec("sub", D, SpectralShape(sol), B, alpha, exps, r_range=(0, r_max))
        return spec, preds, echo

    if lemma == "L4.1":
        l = float(p.get("l", (mu + 2 + exps.l_star) / 2))
        alpha = rate_of_l(l, exps)
        k = l - mu - 2
        bound = 2 * alpha / (mu * k * k)
        E = float(p.get("E", D + 0.9 * bound))
        if not E > D:
            raise ParameterError(f"need E > D, got E={E}")
        c = float(p.get("c", 0.25))
        sol = _spectral(alpha, E + 1, exps, r_max)
        c1 = SAFETY * _sup_ratio(lambda r: sol.evaluate(r)[0] * r ** k, 1.0, r_max)
        b_max = 2 * c / (mu * c1 * (D + 1) ** ((mu + 2) / 2))
        B = float(p.get("B", b_max / SAFETY))
        preds["(38.5)"] = (E - D <= bound * (1 + 1e-12), f"E-D={E - D:.6g} <= {bound:.6g}")
        preds["(38.8)"] = (B <= b_max, f"B={B:.6g} <= {b_max:.6g}")
        echo.update(l=l, alpha=alpha, E=E, c=c, c1=c1, B=B)
        spec = BarrierSpec("super", D, SpectralShape(sol), B, alpha, exps, clamp=("max", E), r_range=(0, r_max))
        return spec, preds, echo

    if lemma == "L4.2":
        l = float(p.get("l", (mu + 2 + exps.l_star) / 2))
        alpha = rate_of_l(l, exps)
        sol = _spectral(alpha, D, exps, r_max)
        B = float(p.get("B", 0.5 * D))
        preds["B < D"] = (0 < B < D, f"B={B:.6g}, D={D:.6g}")
        echo.update(l=l, alpha=alpha, B=B)
        spec = BarrierSpec("sub", D, SpectralShape(sol), -B, alpha, exps, r_range=(0, r_max))
        return spec, preds, echo

    # T1.2-upper / T1.2-lower
    alpha = float(p.get("alpha", exps.alpha_star + float(p.get("eps", 0.1))))
    if not alpha > exps.alpha_star:
        raise ParameterError(f"need alpha > alpha_star={exps.alpha_star:.6g}, got {alpha}")
    d = float(p.get("d", D + 1))
    sol = integrate_phi(SpectralProblem(alpha, d, exps), float(p.get("zero_search", 1e30)), tol=1e-11)
    if sol.first_zero is None:
        raise ParameterError("spectral solution has no zero within the search range")
    r0 = sol.first_zero
    c1 = compute_c1(sol) / SAFETY
    c2 = compute_c2(sol, c1)
    if lemma == "T1.2-upper":
        y0 = float(p.get("y0", c2 / SAFETY))
        preds["(s1)"] = (0 < y0 <= c2, f"y0={y0:.6g} <= c2={c2:.6g}")
        amp, role = y0, "super"
    else:
        y0 = float(p.get("y0", min(c2, D) / SAFETY))
        preds["(s1)"] = (0 < y0 < min(c2, D), f"y0={y0:.6g} < min(c2, D)={min(c2, D):.6g}")
        amp, role = -y0, "sub"
    preds["d = D+1"] = (abs(d - (D + 1)) <= 1e-12 * (D + 1), f"d={d:.6g}")
    echo.update(alpha=alpha, d=d, r0=r0, c1=c1, c2=c2, y0=y0)
    spec = BarrierSpec(role, D, SpectralShape(sol), amp, alpha, exps, r_range=(0, r0))
    return spec, preds, echo


def certify(lemma: str, params: Optional[dict] = None, grid: Optional[CertGrid] = None,
            enforce: bool = True, r_max: float = 1e3) -> CertificateReport:
    """Grid certificate for the differential inequality of ``lemma``.

    With ``enforce`` set, a failed parameter predicate raises
    :class:`PredicateError` naming the inequality.  Otherwise the residual is
    evaluated anyway and the report fails.
    """
    spec, preds, echo = build_barrier(lemma, params or {}, r_max=r_max)
    failed = [f"{name} ({detail})" for name, (ok, detail) in preds.items() if not ok]
    if failed and enforce:
        raise PredicateError(f"{lemma}: parameter condition violated: {'; '.join(failed)}")
    if grid is None:
        r_hi = min(spec.r_range[1], r_max)
        r_hi = r_hi * (1 - 1e-9) if math.isfinite(spec.r_range[1]) and spec.r_range[1] <= r_max else r_hi
        t_lo = spec.t_range[0]
        grid = default_grid(min(1e-3, r_hi / 1e4), r_hi, t_lo, t_lo + 20.0)
    return _certify_spec(lemma, spec, grid, preds, echo)
