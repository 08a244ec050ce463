"""Exponent algebra, Barenblatt profiles and the self-similar change of variables.

Everything downstream asks :func:`derive_exponents` for an :class:`ExponentSet`;
it is the only place where the admissible regime ``n > 2``, ``m < m_star`` is
enforced.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Union

import numpy as np

Number = Union[int, float, Fraction, str]


class ParameterError(ValueError):
    """Raised when parameters fall outside the admissible regime."""


def _as_fraction(value: Number) -> Fraction:
    if isinstance(value, Fraction):
        return value
    if isinstance(value, str):
        return Fraction(value.strip())
    if isinstance(value, int):
        return Fraction(value)
    # exact binary value of the float; "0.25" style strings stay decimal-exact
    return Fraction(float(value))


@dataclass(frozen=True)
class ExponentSet:
    n: int
    m: float
    mu: float
    beta: float
    m_c: float
    m_star: float
    l_star: float
    alpha_star: float
    m_exact: Fraction = field(repr=False, compare=False, default=Fraction(0))

    @property
    def k_star(self) -> float:
        """Amplitude of the singular profile ``U_{0,T}`` in original variables."""
        return (2.0 * (self.n - self.mu)) ** (self.mu / 2.0)

    @property
    def l_min(self) -> float:
        """Lower end ``mu + 2`` of the admissible tail exponents."""
        return self.mu + 2.0

    def as_dict(self) -> dict[str, float]:
        return {
            "n": self.n,
            "m": self.m,
            "mu": self.mu,
            "beta": self.beta,
            "m_c": self.m_c,
            "m_star": self.m_star,
            "l_star": self.l_star,
            "alpha_star": self.alpha_star,
        }


def derive_exponents(n: int, m: Number) -> ExponentSet:
    """Derive all exponents for dimension ``n`` and diffusion exponent ``m``.

    ``m`` may be given as an int, float, :class:`~fractions.Fraction` or a
    decimal/rational string such as ``"1/4"``; the arithmetic is carried out
    in exact rationals and rounded once at the end.
    """
    if isinstance(n, bool) or int(n) != n:
        raise ParameterError(f"n must be an integer, got {n!r}")
    n = int(n)
    if n <= 2:
        raise ParameterError(f"n must be > 2, got n={n}")
    mq = _as_fraction(m)
    m_star = Fraction(n - 4, n - 2)
    if mq >= m_star:
        raise ParameterError(f"m must be < m_star={float(m_star):.12g}, got m={float(mq):.12g}")
    mu = 2 / (1 - mq)
    beta = 1 / (n * (1 - mq) - 2)
    m_c = Fraction(n - 2, n)
    l_star = (n + mu + 2) / 2
    alpha_star = (n - mu - 2) ** 2 / 4
    return ExponentSet(
        n=n,
        m=float(mq),
        mu=float(mu),
        beta=float(beta),
        m_c=float(m_c),
        m_star=float(m_star),
        l_star=float(l_star),
        alpha_star=float(alpha_star),
        m_exact=mq,
    )


@dataclass(frozen=True)
class ProfileSpec:
    D: float
    exps: ExponentSet

    def __post_init__(self):
        if not self.D >= 0:
            raise ParameterError(f"profile parameter D must be >= 0, got {self.D}")

    @property
    def singular(self) -> bool:
        return self.D == 0


def profile_value(p: ProfileSpec, r):
    """``V_D(r) = (D + r^2)^(-mu/2)``; ``D = 0`` gives the singular profile ``r^(-mu)``."""
    r_arr = np.asarray(r, dtype=float)
    if np.any(r_arr < 0):
        raise ParameterError("radius must be >= 0")
    if p.D == 0 and np.any(r_arr == 0):
        raise ParameterError("singular profile (D=0) is undefined at r=0")
    out = (p.D + r_arr * r_arr) ** (-p.exps.mu / 2.0)
    return float(out) if out.ndim == 0 else out


def barenblatt(D: float, r, exps: ExponentSet):
    """Shorthand for ``profile_value(ProfileSpec(D, exps), r)``."""
    return profile_value(ProfileSpec(D, exps), r)


def rate_of_l(l: float, exps: ExponentSet) -> float:
    """Convergence rate ``(l - mu - 2)(n - l)`` for tail exponent ``l``."""
    if not exps.mu + 2 < l <= exps.l_star:
        raise ParameterError(
            f"l must lie in (mu+2, l_star] = ({exps.mu + 2:.12g}, {exps.l_star:.12g}], got {l}"
        )
    return (l - exps.mu - 2.0) * (exps.n - l)


def l_of_alpha(alpha: float, exps: ExponentSet) -> float:
    """Smaller root ``l(alpha)`` of ``(l - mu - 2)(n - l) = alpha``."""
    if not 0 < alpha <= exps.alpha_star:
        raise ParameterError(
            f"alpha must lie in (0, alpha_star] = (0, {exps.alpha_star:.12g}], got {alpha}"
        )
    disc = max((exps.n - exps.mu - 2.0) ** 2 - 4.0 * alpha, 0.0)
    return (exps.n + exps.mu + 2.0 - math.sqrt(disc)) / 2.0


def tail_decay(alpha: float, exps: ExponentSet) -> float:
    """Decay exponent ``k = l(alpha) - mu - 2`` of the spectral profile."""
    return l_of_alpha(alpha, exps) - exps.mu - 2.0


@dataclass(frozen=True)
class SelfSimilarFrame:
    T: float
    exps: ExponentSet

    def __post_init__(self):
        if not self.T > 0:
            raise ParameterError(f"extinction time T must be > 0, got {self.T}")

    @property
    def R0(self) -> float:
        return self.R(0.0)

    def R(self, tau):
        tau = np.asarray(tau, dtype=float)
        if np.any(tau >= self.T):
            raise ParameterError(f"tau must be < T={self.T}")
        out = (self.T - tau) ** (-self.exps.beta)
        return float(out) if out.ndim == 0 else out


def barenblatt_original(D: float, y, tau, frame: SelfSimilarFrame):
    """Generalized Barenblatt solution ``U_{D,T}(y, tau)`` of the original equation."""
    e = frame.exps
    R = frame.R(tau)
    y = np.asarray(y, dtype=float)
    core = D + e.beta * (1.0 - e.m) / 2.0 * (y / R) ** 2
    return R ** (-e.n) * core ** (-1.0 / (1.0 - e.m))


def to_selfsimilar(y, tau, u_value, frame: SelfSimilarFrame):
    """Map ``(y, tau, u)`` to rescaled ``(x, t, v)``."""
    e = frame.exps
    R = frame.R(tau)
    t = np.log(R / frame.R0) / e.mu
    x = math.sqrt(e.beta / e.mu) * np.asarray(y, dtype=float) / R
    v = R ** e.n * np.asarray(u_value, dtype=float)
    return x, t, v


def from_selfsimilar(x, t, v_value, frame: SelfSimilarFrame):
    """Inverse of :func:`to_selfsimilar`."""
    e = frame.exps
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ParameterError("rescaled time must be >= 0")
    R = frame.R0 * np.exp(e.mu * t)
    tau = frame.T - R ** (-1.0 / e.beta)
    y = np.asarray(x, dtype=float) * R / math.sqrt(e.beta / e.mu)
    u = np.asarray(v_value, dtype=float) / R ** e.n
    return y, tau, u
