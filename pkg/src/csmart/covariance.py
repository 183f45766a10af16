"""Compound-symmetry covariance algebra.

``sigma2 * CS_m(rho)`` has unit diagonal scaled by ``sigma2`` and ``rho`` off
the diagonal. Everything here uses the closed forms

    CS_m(rho)^{-1} = I/(1 - rho) - rho/((1 - rho)(1 + (m - 1) rho)) J
    det CS_m(rho)  = (1 - rho)^(m - 1) (1 + (m - 1) rho)

so no dense factorization is ever needed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .data import REGIMENS, EmbeddedAI

__all__ = [
    "RHO_MAX",
    "Structure",
    "VarianceMode",
    "IccMode",
    "WorkingCovariance",
    "SingularCovarianceError",
    "cs_inverse_apply",
    "cs_log_det",
    "cs_cholesky_sample",
    "cs_matrix",
    "one_vinv_one",
]

RHO_MAX = 1.0 - 1e-8


class SingularCovarianceError(ValueError):
    pass


class Structure(str, Enum):
    independence = "independence"
    exchangeable = "exchangeable"


class VarianceMode(str, Enum):
    homogeneous = "homogeneous"
    per_regimen = "per_regimen"


class IccMode(str, Enum):
    shared = "shared"
    per_regimen = "per_regimen"


def _check(m: int, sigma2: float, rho: float) -> None:
    if sigma2 <= 0:
        raise SingularCovarianceError(f"sigma2 must be positive, got {sigma2}")
    if rho >= 1 or (m > 1 and rho <= -1.0 / (m - 1)):
        raise SingularCovarianceError(f"CS_{m}({rho}) is singular")


def cs_matrix(m: int, sigma2: float, rho: float) -> np.ndarray:
    """Dense ``sigma2 * CS_m(rho)``; only for tests and oracles."""
    out = np.full((m, m), sigma2 * rho)
    np.fill_diagonal(out, sigma2)
    return out


def cs_inverse_apply(m: int, sigma2: float, rho: float, v) -> np.ndarray:
    """Return ``(sigma2 CS_m(rho))^{-1} v`` in O(m)."""
    _check(m, sigma2, rho)
    v = np.asarray(v, dtype=float)
    if v.shape[0] != m:
        raise ValueError(f"vector length {v.shape[0]} != m = {m}")
    shrink = rho / (1.0 + (m - 1) * rho)
    return (v - shrink * v.sum(axis=0)) / (sigma2 * (1.0 - rho))


def cs_log_det(m: int, sigma2: float, rho: float) -> float:
    _check(m, sigma2, rho)
    return m * np.log(sigma2) + (m - 1) * np.log1p(-rho) + np.log1p((m - 1) * rho)


def one_vinv_one(m, sigma2, rho):
    """``1' V^{-1} = c 1'`` for V = sigma2 CS_m(rho); returns c (vectorized)."""
    m = np.asarray(m, dtype=float)
    return 1.0 / (np.asarray(sigma2) * (1.0 + (m - 1.0) * np.asarray(rho)))


def cs_cholesky_sample(m: int, sigma2: float, rho: float, mean: float, rng) -> np.ndarray:
    """One draw from ``N(mean 1_m, sigma2 CS_m(rho))`` using a shared factor."""
    if not 0 <= rho < 1:
        raise SingularCovarianceError(f"rho must lie in [0, 1), got {rho}")
    if sigma2 <= 0:
        raise SingularCovarianceError(f"sigma2 must be positive, got {sigma2}")
    z0 = rng.standard_normal()
    z = rng.standard_normal(m)
    return mean + np.sqrt(sigma2) * (np.sqrt(rho) * z0 + np.sqrt(1.0 - rho) * z)


@dataclass
class WorkingCovariance:
    """Per-regimen ``(sigma2, rho)`` of a working ``sigma2 CS(rho)`` model."""

    structure: Structure = Structure.exchangeable
    variance_mode: VarianceMode = VarianceMode.per_regimen
    icc_mode: IccMode = IccMode.per_regimen
    sigma2: dict[EmbeddedAI, float] = field(default_factory=lambda: {ai: 1.0 for ai in REGIMENS})
    rho: dict[EmbeddedAI, float] = field(default_factory=lambda: {ai: 0.0 for ai in REGIMENS})

    def __post_init__(self):
        self.structure = Structure(self.structure)
        self.variance_mode = VarianceMode(self.variance_mode)
        self.icc_mode = IccMode(self.icc_mode)
        for ai in REGIMENS:
            if not self.sigma2[ai] > 0:
                raise SingularCovarianceError(f"sigma2{ai} must be positive")
            if not 0 <= self.rho[ai] <= RHO_MAX:
                raise SingularCovarianceError(f"rho{ai} = {self.rho[ai]} outside [0, 1)")
        if self.structure is Structure.independence and any(self.rho.values()):
            raise ValueError("independence structure requires rho = 0")

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """(sigma2, rho) as length-4 arrays in ``REGIMENS`` order."""
        return (
            np.array([self.sigma2[ai] for ai in REGIMENS]),
            np.array([self.rho[ai] for ai in REGIMENS]),
        )

    def with_values(self, sigma2, rho) -> "WorkingCovariance":
        return WorkingCovariance(
            self.structure,
            self.variance_mode,
            self.icc_mode,
            {ai: float(s) for ai, s in zip(REGIMENS, sigma2)},
            {ai: float(r) for ai, r in zip(REGIMENS, rho)},
        )
