"""Acceptance criteria at n=6, m=0 (mu=2, l_star=5, alpha_star=1)."""

import io
import math
import time

import numpy as np
import pytest

from fdlab.barrier_engine import apply_P, build_barrier, certify, identity_rhs
from fdlab.cli_io import main
from fdlab.core_params import SelfSimilarFrame, barenblatt, barenblatt_original, derive_exponents, to_selfsimilar
from fdlab.pde_solver import (InitialDataSpec, RadialGrid, SolverConfig, State, evolve, perturbation_above,
                              perturbation_below, step)
from fdlab.rate_lab import CEILING_POLICY, ExperimentPlan, run_ceiling_experiment, run_rate_experiment
from fdlab.spectral_ode import SpectralProblem, integrate_phi

E = derive_exponents(6, 0)
GRID = RadialGrid.build()
SWEEP = ("rate-sweep", "n=6", "m=0", "D=1", "delta=0.5", "c=0.5", "l_values=4.2,4.5,4.8", "grid_n=2000",
         "r_max=1e3", "t_end=30", "workers=3")


def test_c01_exponent_algebra(verdict):
    derive_exponents(6, 0)
    t0 = time.perf_counter()
    e = derive_exponents(6, 0)
    dt = time.perf_counter() - t0
    exact = (e.mu == 2 and e.beta == 0.25 and e.m_c == pytest.approx(2 / 3, abs=1e-15) and e.m_star == 0.5
             and e.l_star == 5 and e.alpha_star == 1)
    verdict("1 exponent algebra", exact and dt < 1e-3, f"runtime {1e3 * dt:.3f} ms")


def test_c02_conjugacy(verdict):
    rng = np.random.default_rng(20240601)
    t0 = time.perf_counter()
    worst = 0.0
    for D, T in ((1.0, 1.0), (0.5, 2.0)):
        fr = SelfSimilarFrame(T, E)
        for y, frac in zip(rng.uniform(0, 50, 50), rng.uniform(0, 0.999, 50)):
            tau = frac * fr.T
            x, _, v = to_selfsimilar(y, tau, barenblatt_original(D, y, tau, fr), fr)
            worst = max(worst, abs(v / barenblatt(D, x, E) - 1))
    dt = time.perf_counter() - t0
    verdict("2 conjugacy", worst <= 1e-12 and dt < 1.0, f"max rel err {worst:.2e} over 100 points, {dt:.3f} s")


def test_c03_spectral_dichotomy(verdict):
    t0 = time.perf_counter()
    below = [integrate_phi(SpectralProblem(a, 1.0, E), 1e6) for a in (0.5, 0.9, 0.99)]
    above = [integrate_phi(SpectralProblem(a, 1.0, E), 1e30, tol=1e-11) for a in (1.01, 1.2, 2.0)]
    tail = integrate_phi(SpectralProblem(0.75, 1.0, E), 1e4, fit_window=(1e2, 1e4)).tail_exponent
    dt = time.perf_counter() - t0
    pos = all(s.first_zero is None and np.all(s.phi > 0) for s in below)
    zeros = [s.first_zero for s in above]
    fin = all(z is not None and math.isfinite(z) for z in zeros)
    ok = pos and fin and abs(tail - 0.5) <= 0.01 and dt < 10
    verdict("3 spectral dichotomy", ok,
            f"zeros {', '.join(f'{z:.4g}' for z in zeros)}; tail exponent {tail:.4f}; {dt:.2f} s")


def test_c04_operator_identity(verdict):
    t0 = time.perf_counter()
    spec, _, _ = build_barrier("L3.1", {"exps": E, "D": 1.0, "delta": 0.5})
    r = np.geomspace(0.2, 20.0, 60)
    t = 0.5
    r = r[spec.z(r, t) > 0.2]
    psi, psi_r, psi_rr = spec.shape.derivatives(r)
    rhs = identity_rhs(spec.y(t), spec.y_prime(t), psi, psi_r, psi_rr, r, spec.D, E)
    errs = [np.max(np.abs(apply_P(spec.branch, spec.branch_t, r, t, E, h=h) - rhs)) for h in (4e-3, 2e-3, 1e-3)]
    ratios = [errs[0] / errs[1], errs[1] / errs[2]]
    dt = time.perf_counter() - t0
    ok = all(3.5 <= q <= 4.5 for q in ratios) and dt < 10
    verdict("4 operator identity", ok, f"ratios {ratios[0]:.3f}, {ratios[1]:.3f}; {dt:.2f} s")


def test_c05_barrier_certificates(verdict):
    t0 = time.perf_counter()
    cases = {
        "L3.1": {"D": 1.0, "delta": 0.5, "l": 4.5},
        "L3.4": {"D": 1.0, "l": 4.5},
        "L4.1": {"D": 1.0, "l": 4.5},
        "L4.2": {"D": 1.0, "l": 4.5},
        "T1.2-upper": {"D": 1.0, "alpha": 1.1, "d": 2.0},
        "T1.2-lower": {"D": 1.0, "alpha": 1.1, "d": 2.0},
    }
    passed = {}
    for lemma, p in cases.items():
        rep = certify(lemma, {"exps": E, **p})
        passed[lemma] = rep.passed
        if lemma == "L3.1":
            passed["eta=alpha/2"] = rep.params["eta"] == pytest.approx(rep.params["alpha"] / 2)
    out, err = io.StringIO(), io.StringIO()
    code = main(["barrier-check", "n=6", "m=0", "lemma=L3.4", "D=1", "l=4.5", f"delta={1.1 * 0.875}"],
                stdout=out, stderr=err)
    dt = time.perf_counter() - t0
    ok = all(passed.values()) and code == 3 and dt < 30
    bad = [k for k, v in passed.items() if not v]
    verdict("5 barrier certificates", ok,
            f"{len(passed) - len(bad)}/{len(passed)} pass{' (fail: ' + ','.join(bad) + ')' if bad else ''}; "
            f"violated L3.4 exit {code}; {dt:.1f} s")


@pytest.fixture(scope="module")
def sweeps(tmp_path_factory):
    d = tmp_path_factory.mktemp("sweep")
    out = []
    for name in ("a.csv", "b.csv"):
        path = d / name
        t0 = time.perf_counter()
        code = main([*SWEEP, f"output_path={path}"], stdout=io.StringIO(), stderr=io.StringIO())
        out.append((code, path.read_bytes(), time.perf_counter() - t0))
    return out


def _sweep_table(raw: bytes):
    lines = [ln for ln in raw.decode().splitlines() if not ln.startswith("#")]
    assert lines[0] == "l,target_rate,fitted_rate,rel_err,rmax_sensitivity"
    return [tuple(float(x) for x in ln.split(",")) for ln in lines[1:]]


def test_c06_rate_continuum(sweeps, verdict):
    code, raw, dt = sweeps[0]
    rows = _sweep_table(raw)
    targets = {4.2: 0.36, 4.5: 0.75, 4.8: 0.96}
    within = all(abs(f - targets[l]) / targets[l] < 0.10 for l, _, f, _, _ in rows)
    rates = [f for _, _, f, _, _ in rows]
    increasing = all(b > a for a, b in zip(rates, rates[1:]))
    sens = max(s for *_, s in rows)
    ok = code == 0 and len(rows) == 3 and within and increasing and sens < 0.01
    detail = "; ".join(f"l={l:g} {f:.4f} ({100 * e:.2f}%)" for l, _, f, e, _ in rows)
    verdict("6 rate continuum", ok, f"{detail}; max R_max sensitivity {100 * sens:.3f}%; exit {code}; {dt:.0f} s")


def _one_sided_rate(case, c, sign):
    solver = SolverConfig(grid=GRID, exps=E, D=1.0, tail_k=0.5, cadence=0.25)
    plan = ExperimentPlan(exps=E, initial=InitialDataSpec(case, D=1.0, c=c, l=4.5), solver=solver, t_end=30.0,
                          sign=sign, sensitivities=False)
    return run_rate_experiment(plan)


def test_c07_two_sided_optimality(verdict):
    below = _one_sided_rate("thm1.1-ii", 0.25, -1)
    above = _one_sided_rate("thm1.1-iii", 0.5, +1)
    ok = all(r.conclusive and abs(r.fitted_rate - 0.75) / 0.75 < 0.10 for r in (below, above))
    verdict("7 two-sided optimality", ok,
            f"sup(V_D-v) rate {below.fitted_rate:.4f}, sup(v-V_D) rate {above.fitted_rate:.4f}")


def test_c08_universal_ceiling(verdict):
    reps = []
    for name, prof in (("below", perturbation_below(1.0, E)), ("above", perturbation_above(1.0, E))):
        spec = InitialDataSpec("custom", D=1.0, profile=prof, label=name)
        solver = SolverConfig(grid=GRID, exps=E, D=1.0, tail_k=E.l_star - E.mu - 2, cadence=0.25)
        plan = ExperimentPlan(exps=E, initial=spec, solver=solver, t_end=30.0, policy=CEILING_POLICY)
        reps.append((name, run_ceiling_experiment(plan)))
    ok = all(r.fitted_rate <= 1.1 and r.certificate[1] and r.conclusive for _, r in reps)
    verdict("8 universal ceiling", ok,
            "; ".join(f"{n} rate {r.fitted_rate:.4f} ({r.certificate[0]} "
                      f"{'pass' if r.certificate[1] else 'fail'})" for n, r in reps))


def _ordered_pair(rng, D=1.0):
    r = GRID.r
    base = np.full_like(r, D)
    for _ in range(3):
        a, c, w = rng.uniform(-0.4, 0.8), rng.uniform(0, 5), rng.uniform(0.3, 3)
        base += a * D * np.exp(-((r - c) / w) ** 2)
    base = np.maximum(base, 0.2 * D - 0.5 * r * r)
    gap = np.zeros_like(r)
    for _ in range(2):
        b, c, w = rng.uniform(0, 0.5), rng.uniform(0, 8), rng.uniform(0.2, 4)
        gap += b * D * np.exp(-((r - c) / w) ** 2)
    return base, base + gap


def test_c09_solver_structure(verdict):
    cfg = SolverConfig(grid=GRID, exps=E, D=1.0, tail_k=0.5)
    worst = []
    evolve(State(0.0, np.full(GRID.N + 1, 1.0)), cfg, 5.0,
           monitor=lambda st: worst.append(np.max(np.abs(st.zeta - 1.0))))
    drift = max(worst)
    rng = np.random.default_rng(20240602)
    fixed = SolverConfig(grid=GRID, exps=E, D=1.0, tail_k=0.5, adaptive=False, dt_max=5e-3)
    # where the pair coincides both Newton solves may land one ulp apart;
    # only an excess beyond a few ulps counts as an ordering violation
    ulp = 4 * np.finfo(float).eps
    violations, roundoff, worst_excess, mmatrix = 0, 0, 0.0, True
    for _ in range(20):
        za, zb = _ordered_pair(rng)
        a, b = State(0.0, za, 5e-3), State(0.0, zb, 5e-3)
        for _ in range(100):
            a, ia = step(a, fixed)
            b, ib = step(b, fixed)
            mmatrix &= ia.m_matrix and ib.m_matrix
            excess = a.zeta - b.zeta
            violations += int(np.sum(excess > ulp * np.abs(b.zeta)))
            roundoff += int(np.sum(excess > 0))
            worst_excess = max(worst_excess, float(np.max(excess)))
    ok = drift <= 1e-9 and violations == 0 and mmatrix
    verdict("9 solver structure", ok,
            f"stationary drift {drift:.1e}; {violations} comparison violations in 20 pairs x 100 steps "
            f"(ulp-level ties {roundoff}, max excess {worst_excess:.1e})")


def test_c10_determinism(sweeps, verdict):
    (c1, a, _), (c2, b, _) = sweeps
    verdict("10 determinism", c1 == c2 and a == b, f"{len(a)} bytes, identical={a == b}")
