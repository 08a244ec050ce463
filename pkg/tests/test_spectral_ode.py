import math

import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings, strategies as st

from fdlab.core_params import ParameterError, derive_exponents
from fdlab.spectral_ode import (SpectralProblem, SpectralSolution, apply_L, check_lemma23, comparison_residuals,
                                direct_defect, integrate_phi, make_comparison, ode_defect, selfadjoint_defect)

E = derive_exponents(6, 0)

# first zeros from an independent LSODA integration in r (not log r), rtol 1e-12
ZEROS = {(1.2, 1.0): 1056.8708869654147, (2.0, 1.0): 21.080759023008955, (1.1, 2.0): 27549.70746991105}


def problem(alpha, d=1.0, exps=E):
    return SpectralProblem(alpha, d, exps)


def test_apply_L_constant_is_zero():
    r = np.geomspace(1e-3, 1e3, 20)
    out = apply_L(r, np.ones_like(r), np.zeros_like(r), np.zeros_like(r), problem(0.5))
    assert np.all(out == 0)


def _wminus_sympy(r_val):
    r = sp.symbols("r", positive=True)
    W = (r ** 2 + 1) ** sp.Rational(-1, 4)
    expr = (r ** 2 + 1) * (sp.diff(W, r, 2) + 5 / r * sp.diff(W, r)) - 2 * r * sp.diff(W, r) + sp.Rational(3, 4) * W
    return float(expr.subs(r, r_val))


def test_wminus_residual_matches_symbolic():
    p = problem(0.75)
    f = make_comparison("W_minus", p)
    assert f.k == pytest.approx(0.5, abs=1e-14)
    res = comparison_residuals(f, p, np.array([1e-8, 1.0]))
    assert res.residual[0] == pytest.approx(-2.25, rel=1e-8)
    assert res.residual[1] == pytest.approx(-2.25 * 2 ** -1.25, rel=1e-12)
    assert res.residual[1] == pytest.approx(_wminus_sympy(1), rel=1e-12)
    assert res.residual[1] == pytest.approx(-0.946008467160429, rel=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.05, 1.0), st.floats(0.1, 10.0))
def test_wminus_negative_everywhere(alpha, d):
    p = problem(alpha, d)
    res = comparison_residuals(make_comparison("W_minus", p), p, np.geomspace(1e-3, 1e4, 50))
    assert np.all(res.residual < 0)


def test_wplus_crossover():
    p = problem(0.75)
    f = make_comparison("W_plus", p, upper_alpha=0.8)
    r = np.geomspace(1e-2, 1e8, 200)
    res = comparison_residuals(f, p, r)
    assert res.positive_from is not None
    big = r > 1e6
    ratio = res.residual[big] / r[big] ** (-f.j)
    assert np.all(np.abs(ratio - 0.05) < 0.01)


def test_wplus_rejects_bad_j():
    p = problem(0.75)
    with pytest.raises(ParameterError):
        make_comparison("W_plus", p, upper_alpha=0.7)


def test_wstar_leading_term():
    p = problem(1.0)
    f = make_comparison("W_star", p)
    r = np.array([1e2, 1e3, 1e4])
    res = comparison_residuals(f, p, r).residual
    # L W_* + alpha_* W_* decays faster than r^-k
    ratio = np.abs(res) / r ** (-f.k)
    assert ratio[1] < ratio[0] and ratio[2] < ratio[1] and ratio[2] < 1e-6


def test_tail_exponent_alpha_075():
    sol = integrate_phi(problem(0.75), 1e4, fit_window=(1e2, 1e4))
    assert sol.first_zero is None
    assert sol.tail_exponent == pytest.approx(0.5, rel=0.02)


@pytest.mark.parametrize("alpha", [0.5, 0.9, 0.99])
def test_positive_below_alpha_star(alpha):
    sol = integrate_phi(problem(alpha), 1e6)
    assert sol.first_zero is None
    assert np.all(sol.phi > 0)


@pytest.mark.parametrize("key", sorted(ZEROS))
def test_first_zero_matches_independent_integration(key):
    alpha, d = key
    sol = integrate_phi(problem(alpha, d), 1e30, tol=1e-11)
    assert sol.first_zero == pytest.approx(ZEROS[key], rel=1e-6)


def test_first_zero_just_above_alpha_star():
    sol = integrate_phi(problem(1.01), 1e30)
    assert sol.first_zero is not None and math.isfinite(sol.first_zero)
    assert sol.first_zero > 1e10


def test_small_alpha_near_one():
    sol = integrate_phi(problem(1e-4), 100.0)
    r = np.linspace(0, 1, 50)
    phi, _ = sol.evaluate(r)
    assert np.max(np.abs(phi - 1)) <= 0.01


def test_series_start():
    p = problem(0.75)
    sol = integrate_phi(p, 100.0)
    r = 1e-3
    phi, dphi = sol.evaluate(r)
    assert phi == pytest.approx(1 - 0.75 * r * r / 12, abs=1e-12)
    assert dphi == pytest.approx(-0.75 * r / 6, rel=1e-5)


def test_defect_decreases_with_tolerance():
    p = problem(0.75)
    r = np.geomspace(1e-2, 1e3, 60)
    maxima = []
    for tol in (1e-4, 1e-6, 1e-8, 1e-10):
        sol = integrate_phi(p, 1e4, tol=tol)
        maxima.append(np.max(np.abs(ode_defect(sol, r))))
    assert all(b < a for a, b in zip(maxima, maxima[1:]))
    assert maxima[-1] < 1e-7


def test_direct_and_selfadjoint_forms_agree():
    p = problem(0.75)
    sol = integrate_phi(p, 1e4, tol=1e-12)
    r = np.geomspace(1e-1, 1e3, 40)
    a = direct_defect(sol, r)
    b = selfadjoint_defect(sol, r)
    scale = np.abs(p.alpha * sol.evaluate(r)[0]) + 1e-300
    assert np.max(np.abs(a - b) / scale) < 1e-7


def test_lemma23_no_violations():
    p = problem(0.75)
    sol = integrate_phi(p, 1e6)
    rep = check_lemma23(sol, p)
    assert rep.ok and rep.total == 0 and rep.n_nodes > 100
    phi, dphi = sol.evaluate(1.0)
    assert -dphi / phi <= 0.25


def test_lemma23_flags_synthetic_violator():
    p = problem(0.75)
    r = np.geomspace(1e-3, 1e3, 30)
    fake = SpectralSolution(r_nodes=r, phi=1 + r, dphi=np.ones_like(r), problem=p)
    rep = check_lemma23(fake, p)
    assert rep.violations["monotonicity"].size == r.size
    assert not rep.ok


def test_lemma23_rejects_alpha_above_star():
    with pytest.raises(ParameterError):
        check_lemma23(integrate_phi(problem(0.5), 100.0), problem(1.2))


def test_preconditions():
    with pytest.raises(ParameterError):
        SpectralProblem(0.0, 1.0, E)
    with pytest.raises(ParameterError):
        SpectralProblem(0.5, 0.0, E)
    with pytest.raises(ParameterError):
        integrate_phi(problem(0.5), 1.0)
    with pytest.raises(ParameterError):
        apply_L(np.array([0.0]), np.ones(1), np.zeros(1), np.zeros(1), problem(0.5))
