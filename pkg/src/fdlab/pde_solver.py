"""Implicit solver for the radial rescaled fast-diffusion equation.

The unknown is the pressure offset ``zeta = v^(-2/mu) - r^2``.  Substituting
``v = (r^2 + zeta)^(-mu/2)`` into

    v_t = (v^(m-1) v_r)_r + (n-1)/r v^(m-1) v_r + mu r v_r + mu n v

and dividing by ``-(mu/2) z^(-(mu+2)/2)`` with ``z = r^2 + zeta`` gives

    z_t    = z z_rr + (n-1)/r z z_r + mu r z_r - (mu/2) z_r^2 - 2n z,
    zeta_t = (r^2 + zeta) (zeta_rr + (n-1)/r zeta_r) - mu r zeta_r - (mu/2) zeta_r^2.

The ``r^2`` and ``zeta`` source terms cancel identically, so every constant
``zeta = D`` (the profile ``V_D``) is an exact steady state, and the
linearisation about it is the spectral operator with ``d = D``.  ``zeta``
tends to a constant in the far field, which removes the stiffness of
``v^(m-1)``.

Space: conservative radial Laplacian on a geometrically stretched node grid
(monotone, exact on constants), centred first derivative.  Time: backward
Euler with a Newton solve on the tridiagonal system and an adaptive step.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy.linalg import solve_banded

from .core_params import ExponentSet, ParameterError, barenblatt

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """Time stepping failed; ``state`` holds the last accepted state."""

    def __init__(self, message: str, state: "State"):
        super().__init__(message)
        self.state = state


@dataclass(frozen=True)
class RadialGrid:
    r: np.ndarray
    g: float

    @classmethod
    def build(cls, N: int = 2000, g: float = 1.004, R_max: float = 1e3) -> "RadialGrid":
        """Nodes ``0 = r_0 < ... < r_N = R_max`` with spacings ``h_i = h_0 g^i``."""
        if N < 10:
            raise ParameterError("grid needs N >= 10")
        if not 1.0 <= g <= 1.05:
            raise ParameterError(f"stretching factor g must lie in [1, 1.05], got {g}")
        if g == 1.0:
            h0 = R_max / N
        else:
            h0 = R_max * (g - 1.0) / (g ** N - 1.0)
        if h0 > 1e-2:
            raise ParameterError(f"first spacing r_1={h0:.3g} exceeds 1e-2; increase N or g")
        h = h0 * g ** np.arange(N)
        r = np.concatenate([[0.0], np.cumsum(h)])
        r[-1] = R_max
        return cls(r=r, g=g)

    @property
    def N(self) -> int:
        return self.r.size - 1

    @property
    def R_max(self) -> float:
        return float(self.r[-1])

    def doubled_extent(self) -> "RadialGrid":
        """Same spacing law, twice the outer radius."""
        extra = int(round(math.log(2.0) / math.log(self.g))) if self.g > 1 else self.N
        return RadialGrid.build(self.N + extra, self.g, 2 * self.R_max)

    def refined(self) -> "RadialGrid":
        """Twice the nodes over the same extent."""
        return RadialGrid.build(2 * self.N, math.sqrt(self.g), self.R_max)


@dataclass
class State:
    t: float
    zeta: np.ndarray
    dt: float = 1e-3

    def v(self, grid: RadialGrid, exps: ExponentSet) -> np.ndarray:
        return (grid.r ** 2 + self.zeta) ** (-exps.mu / 2)


@dataclass(frozen=True)
class SolverConfig:
    grid: RadialGrid
    exps: ExponentSet
    D: float
    dt0: float = 1e-3
    dt_max: float = 1e-2
    dt_min: float = 1e-10
    growth: float = 1.2
    newton_target: tuple[int, int] = (3, 5)
    newton_max: int = 12
    newton_tol: float = 1e-12
    boundary: str = "robin"  # "robin" | "dirichlet"
    tail_k: float = 0.0
    cadence: float = 0.1
    adaptive: bool = True

    def __post_init__(self):
        if not self.dt0 > 0 or not self.dt_max > 0:
            raise ParameterError("dt must be > 0")
        if not self.cadence > 0:
            raise ParameterError("cadence must be > 0")
        if self.boundary not in ("robin", "dirichlet"):
            raise ParameterError(f"boundary must be 'robin' or 'dirichlet', got {self.boundary!r}")


# --- initial data -------------------------------------------------------------


def cutoff(r):
    """C^2 step: 0 on [0, 1/2], 1 on [1, inf)."""
    x = np.clip((np.asarray(r, float) - 0.5) / 0.5, 0.0, 1.0)
    return x ** 3 * (10 - 15 * x + 6 * x * x)


@dataclass(frozen=True)
class InitialDataSpec:
    case: str  # "thm1.1-i" | "thm1.1-ii" | "thm1.1-iii" | "custom"
    D: float
    delta: Optional[float] = None
    c: float = 0.5
    l: Optional[float] = None
    profile: Optional[Callable] = None  # custom: v0(r)
    label: str = ""


def perturbation_below(D: float, exps: ExponentSet, a: float = 0.5) -> Callable:
    """``V_D (1 - a exp(-r^2))``."""
    return lambda r: barenblatt(D, r, exps) * (1 - a * np.exp(-np.asarray(r, float) ** 2))


def perturbation_above(D: float, exps: ExponentSet, a: float = 0.5) -> Callable:
    """``V_D (1 + a exp(-r^2))``."""
    return lambda r: barenblatt(D, r, exps) * (1 + a * np.exp(-np.asarray(r, float) ** 2))


def profile_gap(D2: float, D: float, r, exps: ExponentSet):
    """``V_{D2} - V_D`` without cancellation."""
    r = np.asarray(r, float)
    return barenblatt(D, r, exps) * np.expm1(-(exps.mu / 2) * np.log1p((D2 - D) / (r * r + D)))


def zeta_from_deviation(r, dev, D: float, exps: ExponentSet):
    """Offset of ``v = V_D + dev``, computed from ``dev`` so small tails keep full precision."""
    r = np.asarray(r, float)
    eps = np.asarray(dev, float) / barenblatt(D, r, exps)
    return D + (r * r + D) * np.expm1(-(2 / exps.mu) * np.log1p(eps))


def zeta_from_v(r, v, D: float, exps: ExponentSet):
    """``v^(-2/mu) - r^2`` computed relative to ``V_D``."""
    return zeta_from_deviation(r, np.asarray(v, float) - barenblatt(D, r, exps), D, exps)


def deviation(r, zeta, D: float, exps: ExponentSet):
    """``v - V_D`` from the offset, without cancellation."""
    r = np.asarray(r, float)
    q = r * r + D
    return barenblatt(D, r, exps) * np.expm1(-(exps.mu / 2) * np.log1p((np.asarray(zeta) - D) / q))


def build_initial(spec: InitialDataSpec, grid: RadialGrid, exps: ExponentSet) -> State:
    """Initial state for one of the three hypotheses or a custom profile.

    The deviation ``v0 - V_D`` is assembled directly (not as a difference of
    two nearly equal values) and the hypothesis inequalities are re-verified
    node-wise on it.
    """
    r = grid.r
    D = spec.D
    if not D > 0:
        raise ParameterError("D must be > 0")
    VD = barenblatt(D, r, exps)
    far = r >= 1.0
    rtol = 1e-12
    if spec.case != "custom":
        if spec.l is None or not exps.mu + 2 < spec.l < exps.l_star + 1e-12:
            raise ParameterError(f"tail exponent l must lie in (mu+2, l_star), got {spec.l}")
        if not spec.c > 0:
            raise ParameterError("tail amplitude c must be > 0")
        safe = np.where(r > 0, r, 1.0)
        tail = np.where(r > 0, spec.c * safe ** (-spec.l), 0.0) * cutoff(r)
        bound = spec.c * safe ** (-spec.l)

    if spec.case == "thm1.1-i":
        if spec.delta is None or not 0 < spec.delta < D:
            raise ParameterError(f"case i needs 0 < delta < D, got delta={spec.delta}, D={D}")
        gap = profile_gap(spec.delta, D, r, exps)
        dev = np.minimum(gap, tail)
        ok = (VD + dev > 0) & (dev <= gap + rtol * VD) & (~far | (np.abs(dev) <= bound * (1 + rtol)))
    elif spec.case == "thm1.1-ii":
        dev = np.maximum(-tail, 0.5 * barenblatt(2 * D, r, exps) - VD)
        ok = (VD + dev > 0) & (dev <= 0) & (~far | (-dev >= bound * (1 - rtol)))
    elif spec.case == "thm1.1-iii":
        dev = tail
        ok = (dev >= 0) & (~far | (dev >= bound * (1 - rtol)))
    elif spec.case == "custom":
        if spec.profile is None:
            raise ParameterError("custom initial data needs a profile callable")
        v0 = np.asarray(spec.profile(r), float)
        ok = np.isfinite(v0) & (v0 > 0)
        dev = v0 - VD
    else:
        raise ParameterError(f"unknown initial-data case {spec.case!r}")

    if not np.all(ok):
        bad = r[~ok]
        raise ParameterError(
            f"initial data violates the {spec.case} hypotheses at {bad.size} nodes (first r={bad[0]:.6g})")
    return State(t=0.0, zeta=zeta_from_deviation(r, dev, D, exps))


# --- discretisation -------------------------------------------------------------


@dataclass(frozen=True)
class _Stencil:
    """Precomputed metric coefficients for a grid and dimension."""

    lap_m: np.ndarray  # Laplacian weight on zeta_{i-1}-zeta_i
    lap_p: np.ndarray  # Laplacian weight on zeta_{i+1}-zeta_i
    gm: np.ndarray  # first-derivative weight on zeta_i - zeta_{i-1}
    gp: np.ndarray  # first-derivative weight on zeta_{i+1} - zeta_i
    bflux: float  # boundary-flux weight: R^(n-1)/V_N
    r: np.ndarray


def _stencil(grid: RadialGrid, n: int) -> _Stencil:
    r = grid.r
    N = grid.N
    h = np.diff(r)
    face = 0.5 * (r[:-1] + r[1:])  # r_{i+1/2}, i = 0..N-1
    outer = np.concatenate([face, [r[-1]]])
    inner = np.concatenate([[0.0], face])
    vol = (outer ** n - inner ** n) / n
    lap_p = np.zeros(N + 1)
    lap_m = np.zeros(N + 1)
    lap_p[:N] = face ** (n - 1) / h / vol[:N]
    lap_m[1:] = face ** (n - 1) / h / vol[1:]
    gp = np.zeros(N + 1)
    gm = np.zeros(N + 1)
    hm, hp = h[:-1], h[1:]
    denom = hp * hm * (hp + hm)
    gp[1:N] = hm * hm / denom
    gm[1:N] = hp * hp / denom
    return _Stencil(lap_m=lap_m, lap_p=lap_p, gm=gm, gp=gp, bflux=r[-1] ** (n - 1) / vol[-1], r=r)


class _Operator:
    """Spatial operator ``F(zeta)`` and its tridiagonal Jacobian."""

    def __init__(self, config: SolverConfig):
        self.cfg = config
        self.st = _stencil(config.grid, config.exps.n)
        self.mu = config.exps.mu

    def _parts(self, zeta, boundary_value):
        st = self.st
        N = zeta.size - 1
        dm = np.zeros_like(zeta)
        dp = np.zeros_like(zeta)
        dm[1:] = zeta[1:] - zeta[:-1]  # zeta_i - zeta_{i-1}
        dp[:-1] = zeta[1:] - zeta[:-1]  # zeta_{i+1} - zeta_i
        lap = st.lap_p * dp - st.lap_m * dm
        grad = st.gp * dp + st.gm * dm
        robin = self.cfg.boundary == "robin"
        if robin:
            R = st.r[-1]
            gN = -self.cfg.tail_k * (zeta[N] - self.cfg.D) / R
            grad[N] = gN
            lap[N] += st.bflux * gN
        return lap, grad

    def residual(self, zeta):
        lap, grad = self._parts(zeta, None)
        r = self.st.r
        F = (r * r + zeta) * lap - self.mu * r * grad - 0.5 * self.mu * grad * grad
        if self.cfg.boundary == "dirichlet":
            F[-1] = 0.0
        return F, lap, grad

    def jacobian(self, zeta, lap, grad):
        """Bands ``(lower, diag, upper)`` of ``dF/dzeta``."""
        st = self.st
        r = st.r
        z = r * r + zeta
        adv = self.mu * (r + grad)  # derivative of mu r g + (mu/2) g^2 w.r.t. g
        upper = z[:-1] * st.lap_p[:-1] - adv[:-1] * st.gp[:-1]
        lower = z[1:] * st.lap_m[1:] + adv[1:] * st.gm[1:]
        # g_i = gp (z_{i+1}-z_i) + gm (z_i - z_{i-1})  =>  dg/dz_i = gm - gp
        diag = -z * (st.lap_p + st.lap_m) + lap - adv * (st.gm - st.gp)
        if self.cfg.boundary == "robin":
            k = self.cfg.tail_k
            R = r[-1]
            dg = -k / R
            diag[-1] += z[-1] * st.bflux * dg - adv[-1] * dg
        else:
            diag[-1] = 0.0
            lower[-1] = 0.0
        return lower, diag, upper


def m_matrix_ok(lower, diag, upper, dt) -> bool:
    """``I - dt J`` is a Z-matrix with positive, dominant diagonal."""
    a = 1.0 - dt * diag
    off_lo = -dt * lower
    off_up = -dt * upper
    if np.any(off_lo > 0) or np.any(off_up > 0):
        return False
    s = a.copy()
    s[1:] += off_lo
    s[:-1] += off_up
    return bool(np.all(a > 0) and np.all(s > 0))


@dataclass
class StepInfo:
    newton_iterations: int = 0
    retries: int = 0
    m_matrix: bool = True


def _implicit_solve(op: _Operator, zeta_old, dt, cfg: SolverConfig):
    """Newton iteration for ``zeta - dt F(zeta) = zeta_old``; returns ``(zeta, iters, mmatrix)`` or None."""
    zeta = zeta_old.copy()
    N1 = zeta.size
    r2 = op.st.r ** 2
    scale = max(1.0, float(np.max(np.abs(zeta_old))))
    for it in range(1, cfg.newton_max + 1):
        F, lap, grad = op.residual(zeta)
        G = zeta - dt * F - zeta_old
        lower, diag, upper = op.jacobian(zeta, lap, grad)
        ab = np.zeros((3, N1))
        ab[0, 1:] = -dt * upper
        ab[1, :] = 1.0 - dt * diag
        ab[2, :-1] = -dt * lower
        try:
            delta = solve_banded((1, 1), ab, -G)
        except (np.linalg.LinAlgError, ValueError):
            return None
        zeta = zeta + delta
        if not np.all(np.isfinite(zeta)) or np.any(r2 + zeta <= 0):
            return None
        if np.max(np.abs(delta)) <= cfg.newton_tol * scale:
            F, lap, grad = op.residual(zeta)
            lower, diag, upper = op.jacobian(zeta, lap, grad)
            return zeta, it, m_matrix_ok(lower, diag, upper, dt)
    return None


def step(state: State, config: SolverConfig, _op: Optional[_Operator] = None) -> tuple[State, StepInfo]:
    """Advance one implicit step of size ``state.dt`` (halved on Newton failure).

    The returned state carries the step size proposed for the next step.
    """
    op = _op or _Operator(config)
    if state.zeta.shape != config.grid.r.shape:
        raise ParameterError("state does not match the grid")
    if np.any(config.grid.r ** 2 + state.zeta <= 0):
        raise ParameterError("state violates positivity (zeta <= -r^2)")
    dt = min(state.dt, config.dt_max)
    info = StepInfo()
    while True:
        out = _implicit_solve(op, state.zeta, dt, config)
        if out is not None and out[2]:
            break
        info.retries += 1
        dt *= 0.5
        if dt < config.dt_min:
            raise SolverError(f"time step underflow at t={state.t:.6g} (dt < {config.dt_min:g})", state)
    zeta, iters, mm = out
    info.newton_iterations = iters
    info.m_matrix = mm
    next_dt = dt
    if config.adaptive:
        lo, hi = config.newton_target
        if iters < lo:
            next_dt = dt * config.growth
        elif iters > hi:
            next_dt = dt * 0.7
        next_dt = min(next_dt, config.dt_max)
    return State(t=state.t + dt, zeta=zeta, dt=next_dt), info


@dataclass(frozen=True)
class Distance:
    grid_sup: float
    tail: float

    @property
    def value(self) -> float:
        return max(self.grid_sup, self.tail)


def sup_distance(state: State, D: float, grid: RadialGrid, exps: ExponentSet, sign: int = 0,
                 tail_k: Optional[float] = None) -> Distance:
    """Sup over the grid of ``|v - V_D|`` (``sign=0``), ``v - V_D`` (``+1``) or ``V_D - v`` (``-1``).

    The tail beyond ``R_max`` is estimated from the imposed decay
    ``zeta - D ~ (R/r)^k``; the deviation there is largest at ``R_max``.
    """
    dev = deviation(grid.r, state.zeta, D, exps)
    if sign == 0:
        vals = np.abs(dev)
    else:
        vals = sign * dev
    grid_sup = float(np.max(vals))
    tail = float(vals[-1]) if tail_k is None or tail_k >= 0 else 0.0
    return Distance(grid_sup=max(grid_sup, 0.0), tail=max(tail, 0.0))


@dataclass
class Trajectory:
    t: np.ndarray
    e: np.ndarray
    tail: np.ndarray
    snapshots: list = field(default_factory=list)
    steps: int = 0
    mmatrix_failures: int = 0
    final: Optional[State] = None


def evolve(state: State, config: SolverConfig, t_end: float, sign: int = 0,
           keep_snapshots: bool = False, monitor: Optional[Callable] = None) -> Trajectory:
    """Run to ``t_end`` recording the sup-distance to ``V_D`` at the output cadence."""
    op = _Operator(config)
    grid, exps, D = config.grid, config.exps, config.D
    ts, es, tails, snaps = [], [], [], []

    def record(s: State):
        dist = sup_distance(s, D, grid, exps, sign=sign, tail_k=config.tail_k)
        ts.append(s.t)
        es.append(dist.grid_sup)
        tails.append(dist.tail)
        if keep_snapshots:
            snaps.append((s.t, s.zeta.copy()))
        if monitor is not None:
            monitor(s)

    record(state)
    next_out = config.cadence
    steps = 0
    mfail = 0
    s = replace(state, dt=min(state.dt, config.dt0) if state.t == 0 else state.dt)
    while s.t < t_end - 1e-12:
        # land exactly on output times
        s = replace(s, dt=min(s.dt, next_out - s.t)) if next_out - s.t > 1e-12 else s
        s, info = step(s, config, op)
        steps += 1
        mfail += int(not info.m_matrix)
        if s.t >= next_out - 1e-12:
            record(s)
            next_out += config.cadence
    return Trajectory(t=np.array(ts), e=np.array(es), tail=np.array(tails), snapshots=snaps,
                      steps=steps, mmatrix_failures=mfail, final=s)


def evolve_primitive(v0: np.ndarray, grid: RadialGrid, exps: ExponentSet, t_end: float, dt: float = 1e-4) -> np.ndarray:
    """Reference solver in the primitive variable ``v`` (explicit in time).

    Uses the same conservative stencil as the offset scheme on the flux
    ``v^(m-1) v_r`` and the drift ``mu (r v_r + n v)``.  Intended for short
    cross-checks only.
    """
    n, mu, m = exps.n, exps.mu, exps.m
    r = grid.r
    h = np.diff(r)
    face = 0.5 * (r[:-1] + r[1:])
    outer = np.concatenate([face, [r[-1]]])
    inner = np.concatenate([[0.0], face])
    vol = (outer ** n - inner ** n) / n
    v = np.asarray(v0, float).copy()
    v_edge = v[-1]
    steps = int(math.ceil(t_end / dt))
    dt = t_end / steps
    for _ in range(steps):
        vf = 0.5 * (v[:-1] + v[1:])
        diff_flux = vf ** (m - 1) * (v[1:] - v[:-1]) / h
        # drift mu r v is a flux: (1/r^(n-1)) (r^n v)_r = r v_r + n v
        drift_flux = mu * face * vf
        flux = (diff_flux + drift_flux) * face ** (n - 1)
        div = np.zeros_like(v)
        div[:-1] += flux
        div[1:] -= flux
        v = v + dt * div / vol
        v[-1] = v_edge
    return v
