"""Decay-rate experiments on top of the implicit solver.

A plan fixes the data, the solver and the horizon; :func:`run_rate_experiment`
evolves it, fits ``-d log e/dt`` on a window past the initial transient and
repeats the run with the outer radius doubled and with the node count doubled
to report how much the fitted rate moves.
"""

from __future__ import annotations

import hashlib
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.integrate import trapezoid
from scipy.special import gamma as gamma_fn

from .barrier_engine import certify
from .core_params import ExponentSet, ParameterError, barenblatt, rate_of_l
from .pde_solver import (InitialDataSpec, RadialGrid, SolverConfig, Trajectory,
                         build_initial, deviation, evolve)

log = logging.getLogger(__name__)

SENSITIVITY_TOL = 0.01


@dataclass(frozen=True)
class FitPolicy:
    """Window selection for the log-linear fit.

    The window opens once ``e <= upper * e(0)`` and the running slope has
    settled (relative drift below ``settle_tol`` over ``settle_span`` time
    units), and closes when ``e`` first drops below ``lower * e(0)``.
    """

    upper: float = 1e-1
    lower: float = 1e-6
    settle_tol: float = 0.05
    settle_span: float = 1.0
    min_decades: float = 2.0


# Rapidly decaying one-sided data: the transient carries e below 1e-6 e(0)
# before the slope settles, and the approach to alpha_star is algebraic, so the
# window waits for a tighter plateau and the floor only stays clear of round-off.
CEILING_POLICY = FitPolicy(lower=1e-12, settle_tol=0.02, settle_span=2.0)


@dataclass(frozen=True)
class Fit:
    rate: float
    t1: float
    t2: float
    residual: float
    decades: float
    ok: bool
    reason: str = ""


def running_slope(t: np.ndarray, e: np.ndarray) -> np.ndarray:
    return -np.gradient(np.log(e), t)


def fit_rate(t, e, policy: FitPolicy = FitPolicy()) -> Fit:
    """Least-squares slope of ``-log e`` over the policy window."""
    t = np.asarray(t, float)
    e = np.asarray(e, float)
    nan = Fit(math.nan, math.nan, math.nan, math.nan, 0.0, False)
    if t.size < 5 or not e[0] > 0:
        return replace(nan, reason="too few samples")
    pos = e > 0
    last = int(np.argmin(pos)) if not pos.all() else t.size
    t, e = t[:last], e[:last]
    e0 = e[0]
    # window end: first sample under the floor
    below = np.nonzero(e < policy.lower * e0)[0]
    end = int(below[0]) if below.size else t.size
    sl = running_slope(t[:end], e[:end]) if end >= 3 else np.array([])
    start = None
    for i in range(sl.size):
        if e[i] > policy.upper * e0:
            continue
        j = np.searchsorted(t, t[i] + policy.settle_span, side="right")
        if j > sl.size:
            break
        seg = sl[i:j]
        ref = abs(sl[i])
        if ref > 0 and np.max(np.abs(seg - sl[i])) <= policy.settle_tol * ref:
            start = i
            break
    if start is None or end - start < 5:
        return replace(nan, reason="no settled window above the floor")
    tt, le = t[start:end], np.log(e[start:end])
    coef = np.polyfit(tt, le, 1)
    resid = float(np.sqrt(np.mean((np.polyval(coef, tt) - le) ** 2)))
    decades = float((le[0] - le[-1]) / math.log(10))
    ok = decades >= policy.min_decades
    return Fit(rate=float(-coef[0]), t1=float(tt[0]), t2=float(tt[-1]), residual=resid, decades=decades,
               ok=ok, reason="" if ok else f"window spans {decades:.2f} < {policy.min_decades} decades")


def fit_on(t, e, t1: float, t2: float) -> float:
    t = np.asarray(t)
    m = (t >= t1) & (t <= t2) & (np.asarray(e) > 0)
    if m.sum() < 3:
        return math.nan
    return float(-np.polyfit(t[m], np.log(np.asarray(e)[m]), 1)[0])


@dataclass(frozen=True)
class ExperimentPlan:
    exps: ExponentSet
    initial: InitialDataSpec
    solver: SolverConfig
    t_end: float = 30.0
    policy: FitPolicy = FitPolicy()
    sign: int = 0  # 0: sup|v-V_D|, +1: sup(v-V_D), -1: sup(V_D-v)
    sensitivities: bool = True
    label: str = ""

    def plan_id(self) -> str:
        s = self.initial
        key = (f"{self.exps.n}|{self.exps.m!r}|{s.case}|{s.D!r}|{s.delta!r}|{s.c!r}|{s.l!r}|{s.label}|"
               f"{self.solver.grid.N}|{self.solver.grid.g!r}|{self.solver.grid.R_max!r}|{self.solver.boundary}|"
               f"{self.solver.tail_k!r}|{self.t_end!r}|{self.sign}")
        return hashlib.sha256(key.encode()).hexdigest()[:12]


@dataclass
class RateReport:
    label: str
    fitted_rate: float
    t1: float
    t2: float
    residual: float
    decades: float
    target_rate: Optional[float]
    rel_err: Optional[float]
    rmax_sensitivity: float
    n_sensitivity: float
    shift_sensitivity: float
    tail_max: float
    conclusive: bool
    reasons: list = field(default_factory=list)
    certificate: Optional[tuple] = None  # (lemma id, passed)
    plan_id: str = ""

    def as_record(self) -> dict:
        out = {
            "label": self.label, "plan_id": self.plan_id, "fitted_rate": self.fitted_rate,
            "t1": self.t1, "t2": self.t2, "residual": self.residual, "decades": self.decades,
            "target_rate": self.target_rate, "rel_err": self.rel_err,
            "rmax_sensitivity": self.rmax_sensitivity, "n_sensitivity": self.n_sensitivity,
            "shift_sensitivity": self.shift_sensitivity, "tail_max": self.tail_max,
            "conclusive": self.conclusive,
        }
        if self.certificate is not None:
            out["certificate"] = self.certificate[0]
            out["certificate_passed"] = self.certificate[1]
        return out


_CERT_FOR_CASE = {"thm1.1-i": "L3.1", "thm1.1-ii": "L4.1", "thm1.1-iii": "L4.2"}


def _trajectory(plan: ExperimentPlan, grid: RadialGrid) -> Trajectory:
    solver = replace(plan.solver, grid=grid)
    state = build_initial(plan.initial, grid, plan.exps)
    return evolve(state, solver, plan.t_end, sign=plan.sign)


def _shift_sensitivity(tr: Trajectory, fit: Fit, policy: FitPolicy) -> float:
    """Rate change when the window slides by 20% of its length either way.

    The slid window is clipped to the samples the policy admits at all
    (``lower e(0) <= e <= upper e(0)``).
    """
    span = fit.t2 - fit.t1
    e0 = tr.e[0]
    admissible = tr.t[(tr.e <= policy.upper * e0) & (tr.e >= policy.lower * e0)]
    worst = 0.0
    for s in (-0.2, 0.2):
        a, b = fit.t1 + s * span, fit.t2 + s * span
        a, b = max(a, admissible[0]), min(b, admissible[-1])
        rate = fit_on(tr.t, tr.e, a, b)
        if math.isfinite(rate):
            worst = max(worst, abs(rate - fit.rate) / abs(fit.rate))
    return worst


def _certificate(plan: ExperimentPlan, lemma: str) -> tuple:
    s = plan.initial
    params = {"exps": plan.exps, "D": s.D}
    if lemma in ("L3.1", "L3.2", "L3.3"):
        params.update(delta=s.delta, c=s.c, l=s.l)
    elif lemma in ("L4.1", "L4.2") and s.l is not None:
        params.update(l=s.l, c=s.c) if lemma == "L4.1" else params.update(l=s.l)
    try:
        rep = certify(lemma, params)
        return lemma, rep.passed
    except ParameterError as exc:
        log.info("certificate %s not applicable: %s", lemma, exc)
        return lemma, False


def _analyse(plan: ExperimentPlan, trs: dict, target: Optional[float], cert) -> RateReport:
    base = trs["base"]
    fit = fit_rate(base.t, base.e, plan.policy)
    reasons = [] if fit.ok else [fit.reason]
    sens = {}
    for key in ("rmax", "n"):
        tr = trs.get(key)
        if tr is None or not fit.ok:
            sens[key] = math.nan
            continue
        other = fit_rate(tr.t, tr.e, plan.policy)
        rate = other.rate if other.ok else fit_on(tr.t, tr.e, fit.t1, fit.t2)
        sens[key] = abs(rate - fit.rate) / abs(fit.rate)
    for key, name in (("rmax", "R_max doubling"), ("n", "N doubling")):
        if math.isfinite(sens[key]) and sens[key] >= SENSITIVITY_TOL:
            reasons.append(f"{name} moves the rate by {100 * sens[key]:.2f}%")
    shift = _shift_sensitivity(base, fit, plan.policy) if fit.ok else math.nan
    rel = abs(fit.rate - target) / target if (target is not None and fit.ok) else None
    return RateReport(
        label=plan.label or plan.initial.case, fitted_rate=fit.rate, t1=fit.t1, t2=fit.t2,
        residual=fit.residual, decades=fit.decades, target_rate=target, rel_err=rel,
        rmax_sensitivity=sens["rmax"], n_sensitivity=sens["n"], shift_sensitivity=shift,
        tail_max=float(np.max(base.tail)), conclusive=not reasons, reasons=reasons,
        certificate=cert, plan_id=plan.plan_id(),
    )


def _grids(plan: ExperimentPlan) -> dict:
    g = plan.solver.grid
    out = {"base": g}
    if plan.sensitivities:
        out["rmax"] = g.doubled_extent()
        out["n"] = g.refined()
    return out


def run_rate_experiment(plan: ExperimentPlan, certificate: bool = True) -> RateReport:
    """Evolve the plan's data and fit the rate of ``e(t) = sup |v - V_D|`` (or one-sided)."""
    s = plan.initial
    if s.case not in _CERT_FOR_CASE:
        raise ParameterError(f"rate experiments need case i, ii or iii, got {s.case!r}")
    target = rate_of_l(s.l, plan.exps)
    trs = {k: _trajectory(plan, g) for k, g in _grids(plan).items()}
    cert = _certificate(plan, _CERT_FOR_CASE[s.case]) if certificate else None
    return _analyse(plan, trs, target, cert)


def one_sidedness(plan: ExperimentPlan) -> int:
    """+1 if ``v0 > V_D`` on the grid, -1 if ``v0 < V_D``, 0 otherwise."""
    grid = plan.solver.grid
    state = build_initial(plan.initial, grid, plan.exps)
    dev = deviation(grid.r, state.zeta, plan.initial.D, plan.exps)
    # a perturbation below round-off in the far field reads as exactly zero;
    # only a trailing run of such nodes is tolerated
    nz = np.nonzero(dev != 0)[0]
    if nz.size == 0 or nz[-1] + 1 != nz.size:
        return 0
    if np.all(dev[nz] > 0):
        return 1
    if np.all(dev[nz] < 0):
        return -1
    return 0


def run_ceiling_experiment(plan: ExperimentPlan, certificate: bool = True) -> RateReport:
    """Rate of one-sided data against the ceiling ``alpha_star``.

    The report's ``target_rate`` is ``None``; ``conclusive`` additionally
    requires ``rate <= 1.1 alpha_star``.
    """
    side = one_sidedness(plan)
    if side == 0:
        raise ParameterError("ceiling experiments need data strictly on one side of V_D")
    plan = replace(plan, sign=side)
    trs = {k: _trajectory(plan, g) for k, g in _grids(plan).items()}
    cert = None
    if certificate:
        lemma = "T1.2-upper" if side < 0 else "T1.2-lower"
        try:
            cert = (lemma, certify(lemma, {"exps": plan.exps, "D": plan.initial.D}).passed)
        except ParameterError as exc:
            log.info("certificate %s not applicable: %s", lemma, exc)
            cert = (lemma, False)
    rep = _analyse(plan, trs, None, cert)
    ceiling = 1.1 * plan.exps.alpha_star
    if rep.fitted_rate > ceiling:
        rep.reasons.append(f"fitted rate {rep.fitted_rate:.4g} exceeds {ceiling:.4g}")
        rep.conclusive = False
    return rep


def _run_job(args):
    plan, kind = args
    return run_ceiling_experiment(plan) if kind == "ceiling" else run_rate_experiment(plan)


def run_plans(plans: Sequence[ExperimentPlan], kind: str = "rate", workers: int = 1) -> list[RateReport]:
    """Run independent plans, optionally in worker processes; output order follows ``plans``."""
    jobs = [(p, kind) for p in plans]
    if workers <= 1:
        return [_run_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_job, jobs))


def default_sweep_plan(exps: ExponentSet, l: float, D: float = 1.0, delta: float = 0.5, c: float = 0.5,
                       N: int = 2000, g: float = 1.004, R_max: float = 1e3, t_end: float = 30.0,
                       boundary: str = "robin", sensitivities: bool = True) -> ExperimentPlan:
    grid = RadialGrid.build(N, g, R_max)
    solver = SolverConfig(grid=grid, exps=exps, D=D, boundary=boundary, tail_k=l - exps.mu - 2, cadence=0.25)
    spec = InitialDataSpec("thm1.1-i", D=D, delta=delta, c=c, l=l)
    return ExperimentPlan(exps=exps, initial=spec, solver=solver, t_end=t_end, sensitivities=sensitivities,
                          label=f"l={l:g}")


def figure2_sweep(exps: ExponentSet, ls: Sequence[float], fitted: Optional[dict] = None):
    """Rows ``(l, rate[, fitted])`` on ``(mu+2, l_star]`` and the ``alpha_star`` reference value."""
    rows = []
    for l in ls:
        rate = rate_of_l(float(l), exps)
        if fitted is not None:
            rows.append((float(l), rate, fitted.get(float(l), math.nan)))
        else:
            rows.append((float(l), rate))
    return rows, exps.alpha_star


@dataclass
class EntropyDiagnostic:
    t: np.ndarray
    F: np.ndarray
    tail: np.ndarray
    rate: float
    sandwich_ok: bool
    variational: bool
    notes: list = field(default_factory=list)


def sphere_area(n: int) -> float:
    return 2 * math.pi ** (n / 2) / gamma_fn(n / 2)


def entropy_value(r, v, D: float, exps: ExponentSet, tail_k: Optional[float] = None) -> tuple[float, float]:
    """Relative entropy of ``w = v / V_D`` over the grid plus a tail estimate.

    The integrand is ``w - 1 - (w^m - 1)/m`` weighted by ``V_D^m``; beyond the
    last node it is extrapolated with the decay implied by ``zeta - D ~ r^-k``.
    """
    m, n, mu = exps.m, exps.n, exps.mu
    if m == 0:
        raise ParameterError("entropy diagnostic is undefined for m = 0")
    r = np.asarray(r, float)
    VD = barenblatt(D, r, exps)
    w = np.asarray(v, float) / VD
    eps = w - 1.0
    # w - 1 - (w^m - 1)/m without cancellation for small eps
    dens = eps - np.expm1(m * np.log1p(eps)) / m
    f = dens * VD ** m / (1 - m) * sphere_area(n) * r ** (n - 1)
    total = float(trapezoid(f, r))
    tail = 0.0
    if tail_k is not None:
        # eps ~ r^-(k+2), V_D^m ~ r^-(mu-2): f ~ r^(n-1-2k-4-mu+2)
        p = 2 * tail_k + 2 + mu - n
        tail = float(f[-1] * r[-1] / p) if p > 0 else math.inf
    return total, tail


def entropy_diagnostic(snapshots, D: float, exps: ExponentSet, grid: RadialGrid, tail_k: Optional[float] = None,
                       D_low: Optional[float] = None, D_high: Optional[float] = None, data_l: Optional[float] = None,
                       policy: FitPolicy = FitPolicy()) -> EntropyDiagnostic:
    """Entropy decay along ``snapshots`` (pairs ``(t, zeta)``)."""
    if exps.m == 0:
        raise ParameterError("entropy diagnostic is undefined for m = 0")
    r = grid.r
    notes = []
    ts, Fs, tails = [], [], []
    sandwich = True
    for t, zeta in snapshots:
        v = (r * r + zeta) ** (-exps.mu / 2)
        if D_low is not None and D_high is not None:
            lo = barenblatt(D_high, r, exps)
            hi = barenblatt(D_low, r, exps)
            sandwich &= bool(np.all(v >= lo * (1 - 1e-12)) and np.all(v <= hi * (1 + 1e-12)))
        F, tail = entropy_value(r, v, D, exps, tail_k)
        ts.append(t)
        Fs.append(F)
        tails.append(tail)
    if not sandwich:
        notes.append("sandwich V_D1 <= v <= V_D0 violated")
    variational = data_l is None or data_l > exps.n
    if not variational:
        notes.append("outside variational basin")
    ts, Fs = np.array(ts), np.array(Fs)
    fit = fit_rate(ts, Fs, policy)
    if not fit.ok:
        notes.append(fit.reason)
    return EntropyDiagnostic(t=ts, F=Fs, tail=np.array(tails), rate=fit.rate, sandwich_ok=sandwich,
                             variational=variational, notes=notes)
