"""Contrasts, confidence intervals and p-values.

The Student t distribution is evaluated through the regularized incomplete
beta function; quantiles are found by bracketing root search.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq
from scipy.special import betainc, ndtr, ndtri

from .data import REGIMENS, EmbeddedAI
from .gee import Q, FitResult
from .sandwich import FsaConfig, SandwichResult

__all__ = [
    "Contrast",
    "ContrastRow",
    "InferenceReport",
    "EFFECT_PAIRS",
    "t_cdf",
    "t_quantile",
    "quantile",
    "interval",
    "pairwise_contrast",
    "effect_contrasts",
    "report",
]

_QUANTILE_TOL = 1e-12


def t_cdf(t: float, df: float) -> float:
    """Student t distribution function."""
    if df <= 0:
        raise ValueError("degrees of freedom must be positive")
    if np.isinf(df):
        return float(ndtr(t))
    t2 = t * t
    if t2 < df:
        # complementary form avoids cancellation near the center
        half = 0.5 * betainc(0.5, df / 2.0, t2 / (df + t2))
        return float(0.5 + half if t > 0 else 0.5 - half)
    tail = 0.5 * betainc(df / 2.0, 0.5, df / (df + t2))
    return float(1.0 - tail if t > 0 else tail)


def t_quantile(prob: float, df: float) -> float:
    """Inverse of :func:`t_cdf`, accurate to about 1e-10."""
    if not 0 < prob < 1:
        raise ValueError("prob must lie in (0, 1)")
    if df <= 0:
        raise ValueError("degrees of freedom must be positive")
    if np.isinf(df):
        return float(ndtri(prob))
    if prob == 0.5:
        return 0.0
    if prob < 0.5:
        return -t_quantile(1.0 - prob, df)
    hi = max(float(ndtri(prob)), 1.0)
    while t_cdf(hi, df) < prob:
        hi *= 2.0
    return brentq(lambda t: t_cdf(t, df) - prob, 0.0, hi, xtol=_QUANTILE_TOL, rtol=4 * np.finfo(float).eps)


def quantile(prob: float, reference: str, df: float | None = None) -> float:
    if reference == "normal":
        return float(ndtri(prob))
    if reference == "t":
        if df is None or df <= 0:
            raise ValueError(f"t reference requires positive degrees of freedom, got {df}")
        return t_quantile(prob, df)
    raise ValueError(f"unknown reference {reference!r}")


def interval(estimate: float, variance: float, n: int, p: int, q: int = Q,
             reference: str = "normal", level: float = 0.95):
    """``(low, high, p_value)`` for a scalar estimate."""
    if variance < 0:
        raise ValueError("variance must be nonnegative")
    df = n - p - q
    if reference == "t" and df <= 0:
        raise ValueError(f"nonpositive degrees of freedom n - p - q = {df}")
    crit = quantile(0.5 + level / 2.0, reference, df)
    se = np.sqrt(variance)
    half = crit * se
    if se == 0:
        pval = 1.0 if estimate == 0 else 0.0
    else:
        z = abs(estimate) / se
        upper = 1.0 - ndtr(z) if reference == "normal" else 1.0 - t_cdf(z, df)
        pval = float(min(1.0, 2.0 * upper))
    return estimate - half, estimate + half, pval


@dataclass(frozen=True)
class Contrast:
    label: str
    coefficients: np.ndarray

    def __neg__(self) -> "Contrast":
        return Contrast(f"-({self.label})", -self.coefficients)


def _fmt(ai) -> str:
    return "({:d},{:d})".format(*ai)


def pairwise_contrast(ai, ai_prime, p: int = 0) -> Contrast:
    """Coefficients of ``mu(ai) - mu(ai')`` in ``(beta, eta)``."""
    (a1, a2), (b1, b2) = ai, ai_prime
    coef = np.zeros(Q + p)
    coef[1:Q] = (a1 - b1, a2 - b2, a1 * a2 - b1 * b2)
    return Contrast(f"{_fmt(ai)} v {_fmt(ai_prime)}", coef)


EFFECT_PAIRS = (
    (EmbeddedAI(1, 1), EmbeddedAI(-1, -1)),
    (EmbeddedAI(1, -1), EmbeddedAI(-1, 1)),
    (EmbeddedAI(1, 1), EmbeddedAI(1, -1)),
    (EmbeddedAI(1, 1), EmbeddedAI(-1, 1)),
    (EmbeddedAI(1, -1), EmbeddedAI(-1, -1)),
    (EmbeddedAI(-1, 1), EmbeddedAI(-1, -1)),
)


def effect_contrasts(p: int = 0) -> list[Contrast]:
    return [pairwise_contrast(a, b, p) for a, b in EFFECT_PAIRS]


def regimen_mean_contrasts(p: int = 0) -> list[Contrast]:
    out = []
    for ai in REGIMENS:
        coef = np.zeros(Q + p)
        coef[:Q] = (1.0, ai[0], ai[1], ai[0] * ai[1])
        out.append(Contrast(f"mu{_fmt(ai)}", coef))
    return out


@dataclass(frozen=True)
class ContrastRow:
    label: str
    estimate: float
    se: float
    low: float
    high: float
    p_value: float


@dataclass(frozen=True)
class InferenceReport:
    parameters: tuple[ContrastRow, ...]
    contrasts: tuple[ContrastRow, ...]
    fsa: FsaConfig
    df: int
    level: float

    def rows(self):
        return self.parameters + self.contrasts

    def format(self) -> str:
        ref = "t(%d)" % self.df if self.fsa.reference == "t" else "normal"
        lines = [f"{self.fsa.label}; reference {ref}; {self.level:.0%} intervals",
                 f"{'term':<22}{'estimate':>12}{'se':>12}{'low':>12}{'high':>12}{'p':>10}"]
        for r in self.rows():
            lines.append(f"{r.label:<22}{r.estimate:>12.4f}{r.se:>12.4f}{r.low:>12.4f}{r.high:>12.4f}{r.p_value:>10.4f}")
        return "\n".join(lines)


def _row(label, coef, theta, sigma, n, p, fsa, level):
    est = float(coef @ theta)
    var = max(float(coef @ sigma @ coef), 0.0)
    low, high, pval = interval(est, var, n, p, Q, fsa.reference, level)
    return ContrastRow(label, est, float(np.sqrt(var)), low, high, pval)


def report(fit: FitResult, sandwich: SandwichResult, contrasts=None, fsa: FsaConfig | None = None,
           level: float = 0.95) -> InferenceReport:
    """Parameter and contrast table; contrasts default to the six effects."""
    fsa = fsa or sandwich.fsa
    p = fit.p
    contrasts = effect_contrasts(p) if contrasts is None else contrasts
    theta, sigma = fit.theta, sandwich.sigma_hat
    names = fit.model.names
    params = tuple(
        _row(names[j], np.eye(Q + p)[j], theta, sigma, fit.n, p, fsa, level) for j in range(Q + p)
    )
    rows = tuple(_row(c.label, c.coefficients, theta, sigma, fit.n, p, fsa, level) for c in contrasts)
    return InferenceReport(params, rows, fsa, fit.n - p - Q, level)
