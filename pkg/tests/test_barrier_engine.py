import math

import numpy as np
import pytest
import sympy as sp

from fdlab.barrier_engine import (LEMMA_IDS, A_D_residual, CertGrid, GridError, PowerLaw, PredicateError,
                                  apply_P, build_barrier, certify, compute_c1, compute_c2, identity_rhs)
from fdlab.core_params import ParameterError, barenblatt, derive_exponents, rate_of_l
from fdlab.spectral_ode import SpectralProblem, integrate_phi

E = derive_exponents(6, 0)


def test_apply_P_vanishes_on_profile():
    r = np.geomspace(0.05, 50, 40)
    for h in (1e-2, 5e-3):
        res = apply_P(lambda r, t: barenblatt(1.0, r, E), lambda r, t: 0 * r, r, 0.0, E, h=h)
        scale = 2 * E.n * barenblatt(1.0, r, E)
        assert np.max(np.abs(res) / scale) < 10 * h * h


def _sympy_P(n, m, D, psi_expr, y_expr, r_val, t_val):
    """``P w`` for ``w = (r^2 + D + y psi)^(-mu/2)`` by symbolic differentiation."""
    r, t = sp.symbols("r t", positive=True)
    mu = 2 / (1 - sp.nsimplify(m))
    w = (r ** 2 + D + y_expr(t) * psi_expr(r)) ** (-mu / 2)
    wr = sp.diff(w, r)
    P = sp.diff(w, t) - (sp.diff(w ** (m - 1) * wr, r) + (n - 1) / r * w ** (m - 1) * wr) - mu * r * wr - mu * n * w
    return float(P.subs({r: r_val, t: t_val}))


@pytest.mark.parametrize("nm", [(6, 0), (5, 0), (6, sp.Rational(1, 4))])
def test_factorisation_matches_symbolic(nm):
    n, m = nm
    e = derive_exponents(n, str(m))
    D = 1.5
    rs = np.array([0.3, 1.0, 2.5, 7.0])
    t = 0.4
    y, yp = 0.3 * math.exp(-0.5 * t), -0.15 * math.exp(-0.5 * t)
    psi = np.exp(-rs) * (1 + rs)
    psi_r = -rs * np.exp(-rs)
    psi_rr = (rs - 1) * np.exp(-rs)
    rhs = identity_rhs(y, yp, psi, psi_r, psi_rr, rs, D, e)
    exact = [_sympy_P(n, m, D, lambda r: sp.exp(-r) * (1 + r), lambda t: sp.Rational(3, 10) * sp.exp(-t / 2),
                      rv, t) for rv in rs]
    np.testing.assert_allclose(rhs, exact, rtol=1e-10, atol=1e-14)


def _l31_mismatch(h):
    spec, _, _ = build_barrier("L3.1", {"exps": E, "D": 1.0, "delta": 0.5})
    r = np.geomspace(0.2, 20.0, 60)
    t = 0.5
    r = r[spec.z(r, t) > 0.2]  # smooth branch only
    assert r.size > 20
    P = apply_P(spec.branch, spec.branch_t, r, t, E, h=h)
    psi, psi_r, psi_rr = spec.shape.derivatives(r)
    rhs = identity_rhs(spec.y(t), spec.y_prime(t), psi, psi_r, psi_rr, r, spec.D, E)
    return np.max(np.abs(P - rhs))


def test_apply_P_rejects_nonfinite():
    spec, _, _ = build_barrier("L3.1", {"exps": E, "D": 1.0, "delta": 0.5})
    with pytest.raises(ParameterError):
        apply_P(spec.branch, spec.branch_t, np.array([1e-2]), 0.0, E, h=1e-3)


def test_identity_second_order_on_l31_barrier():
    errs = [_l31_mismatch(h) for h in (4e-3, 2e-3, 1e-3)]
    ratios = [errs[0] / errs[1], errs[1] / errs[2]]
    assert all(3.5 <= q <= 4.5 for q in ratios), ratios


def test_l34_closed_form():
    l, D, B = 4.5, 1.0, 2.2
    k = l - E.mu - 2
    alpha = rate_of_l(l, E)
    r = np.geomspace(0.1, 100, 25)
    t = 1.0
    y = -B * math.exp(-alpha * t)
    psi, psi_r, psi_rr = PowerLaw(k).derivatives(r)
    got = A_D_residual(y, -alpha * y, psi, psi_r, psi_rr, r, D, E)
    closed = (-k * (E.n + E.mu - l) * D * r ** (-(l - E.mu))
              + B * math.exp(-alpha * t) * k * (E.n + E.mu - l + E.mu / 2 * k) * r ** (-2 * (l - E.mu - 1)))
    np.testing.assert_allclose(got, closed, rtol=1e-12, atol=1e-15)
    # frozen sympy value at r=2, t=1
    i = np.array([2.0])
    psi, psi_r, psi_rr = PowerLaw(k).derivatives(i)
    val = A_D_residual(y, -alpha * y, psi, psi_r, psi_rr, i, D, E)[0]
    assert val == pytest.approx(-0.0495576127615565, rel=1e-12)


def test_linearisation_limit():
    p = SpectralProblem(0.75, 1.0, E)
    sol = integrate_phi(p, 1e4)
    r = np.geomspace(1e-2, 1e3, 30)
    phi, dphi, phi_rr = sol.derivatives(r)
    y = 1e-12
    res = A_D_residual(y, -0.75 * y, phi, dphi, phi_rr, r, 1.0, E)
    assert np.max(np.abs(res)) < 1e-9


def test_lemma42_residual_nonnegative():
    p = SpectralProblem(0.75, 1.0, E)
    sol = integrate_phi(p, 1e4)
    r = np.geomspace(1e-3, 1e3, 200)
    phi, dphi, phi_rr = sol.derivatives(r)
    for t in (0.0, 1.0, 5.0):
        y = -0.5 * math.exp(-0.75 * t)
        res = A_D_residual(y, -0.75 * y, phi, dphi, phi_rr, r, 1.0, E)
        assert np.all(res >= -1e-10)


@pytest.mark.parametrize("lemma", LEMMA_IDS)
def test_default_certificates_pass(lemma):
    rep = certify(lemma, {"exps": E, "D": 1.0})
    assert rep.passed, (lemma, rep.failed_predicates(), rep.violations[:3])
    assert rep.margin >= 0


def test_l31_with_half_alpha_eta():
    rep = certify("L3.1", {"exps": E, "D": 1.0, "delta": 0.5, "l": 4.5})
    assert rep.passed
    assert rep.params["eta"] == pytest.approx(rep.params["alpha"] / 2)


def test_l34_violation_fails_where_closed_form_is_positive():
    bound = 0.875  # (n+mu-l) D / (n+mu-l + mu/2 k) at n=6, m=0, l=4.5, D=1
    rep = certify("L3.4", {"exps": E, "D": 1.0, "delta": 1.1 * bound}, enforce=False)
    assert not rep.passed
    assert rep.failed_predicates() == ["(31.4)"]
    assert len(rep.violations) > 0
    B, k, alpha = rep.params["B"], 0.5, 0.75
    for r, t, A in rep.violations:
        closed = -k * 3.5 * r ** -2.5 + B * math.exp(-alpha * t) * k * 4.0 * r ** -3
        assert closed > 0
        assert A == pytest.approx(closed, rel=1e-9)
    with pytest.raises(PredicateError, match=r"\(31\.4\)"):
        certify("L3.4", {"exps": E, "D": 1.0, "delta": 1.1 * bound})


def test_l34_just_inside_passes():
    rep = certify("L3.4", {"exps": E, "D": 1.0, "delta": 0.99 * 0.875})
    assert rep.passed


def test_t12_constants():
    spec, preds, echo = build_barrier("T1.2-upper", {"exps": E, "D": 1.0})
    assert echo["d"] == 2.0 and echo["alpha"] == pytest.approx(1.1)
    assert echo["r0"] == pytest.approx(27549.70746991105, rel=1e-6)
    assert echo["c1"] > 0 and echo["c2"] > 0
    assert all(ok for ok, _ in preds.values())


def test_compute_c2_scaling_and_guard():
    sol = integrate_phi(SpectralProblem(1.1, 2.0, E), 1e30, tol=1e-11)
    c1 = compute_c1(sol)
    assert c1 > 0
    c2 = compute_c2(sol, c1)
    assert c2 > 0
    assert compute_c2(sol, 2 * c1) == pytest.approx(2 * c2, rel=1e-12)

    class Flat:
        def derivatives(self, r):
            r = np.asarray(r, float)
            return np.ones_like(r), np.zeros_like(r), np.zeros_like(r)

    with pytest.raises(ParameterError, match="vanishes"):
        compute_c2(Flat(), 1.0, r0=10.0, n=6, mu=2.0)
    with pytest.raises(ParameterError):
        compute_c2(sol, 0.0)


def test_coarse_grid_rejected():
    with pytest.raises(GridError):
        certify("L4.2", {"exps": E, "D": 1.0}, grid=CertGrid(np.geomspace(1e-3, 1e3, 100), np.linspace(0, 5, 30)))
    with pytest.raises(GridError):
        certify("L4.2", {"exps": E, "D": 1.0}, grid=CertGrid(np.geomspace(1e-3, 1e3, 2000), np.linspace(0, 5, 5)))


def test_refined_grid_keeps_passing():
    # nested grids: every coarse node is also a fine node
    coarse = certify("L4.1", {"exps": E, "D": 1.0},
                     grid=CertGrid(np.geomspace(1e-3, 999.0, 1200), np.linspace(0, 20, 41)))
    fine = certify("L4.1", {"exps": E, "D": 1.0},
                   grid=CertGrid(np.geomspace(1e-3, 999.0, 2399), np.linspace(0, 20, 81)))
    assert coarse.passed and fine.passed
    assert fine.margin <= coarse.margin * (1 + 1e-9)


def test_unknown_lemma():
    with pytest.raises(ParameterError):
        certify("L9.9", {})
