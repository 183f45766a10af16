"""Sandwich variance estimators and finite-sample adjustments.

FSA1 (``rho >= 0``) is applied inside the fit. The remaining adjustments
are configured by :class:`FsaConfig`:

* ``reference`` -- normal or Student t with ``n - p - q`` df (FSA2),
* ``dof_scale`` -- multiply by ``n / (n - p - q)`` (FSA3),
* ``bias_correct`` -- replace the meat by the leverage-adjusted scores (FSA4).

With estimated weights the meat is further reduced by ``C F^{-1} C'``;
when FSA4 is also on, this subtraction is applied to the corrected meat.
"""

from __future__ import annotations

import re
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .gee import FitResult

__all__ = [
    "FsaConfig",
    "PRESETS",
    "variant_name",
    "resolve_fsa",
    "SandwichResult",
    "SingularLeverageError",
    "cluster_scores",
    "cluster_score",
    "leverages",
    "bias_corrected_scores",
    "weight_correction",
    "sandwich_plain",
    "sandwich_estimated_weights",
    "fsa3_scale",
    "fsa4_bias_corrected",
    "sandwich",
]

LEVERAGE_COND_MAX = 1e12


class SingularLeverageError(np.linalg.LinAlgError):
    def __init__(self, message, cluster=None):
        super().__init__(message)
        self.cluster = cluster


@dataclass(frozen=True)
class FsaConfig:
    dof_scale: bool = False
    bias_correct: bool = False
    reference: str = "normal"

    def __post_init__(self):
        if self.reference not in ("normal", "t"):
            raise ValueError(f"reference must be 'normal' or 't', got {self.reference!r}")

    @property
    def label(self) -> str:
        used = ["1"]
        if self.reference == "t":
            used.append("2")
        if self.dof_scale:
            used.append("3")
        if self.bias_correct:
            used.append("4")
        return "FSA " + "+".join(used)


PRESETS = {
    "minimal": FsaConfig(),
    "on-the-shelf": FsaConfig(dof_scale=True, reference="t"),
    "proposed": FsaConfig(bias_correct=True, reference="t"),
    "full": FsaConfig(dof_scale=True, bias_correct=True, reference="t"),
}


def variant_name(fsa: FsaConfig) -> str:
    """Preset name for ``fsa`` if one matches, else a code such as ``fsa124``."""
    for name, cfg in PRESETS.items():
        if cfg == fsa:
            return name
    return "fsa" + fsa.label.split()[1].replace("+", "")


def resolve_fsa(name: str | FsaConfig) -> FsaConfig:
    """Inverse of :func:`variant_name`; accepts preset names and ``fsa1[2][3][4]``."""
    if isinstance(name, FsaConfig):
        return name
    if name in PRESETS:
        return PRESETS[name]
    code = name.lower()
    if not code.startswith("fsa1") or not re.fullmatch(r"fsa1(2)?(3)?(4)?", code):
        raise ValueError(f"unknown FSA variant {name!r}")
    return FsaConfig(dof_scale="3" in code, bias_correct="4" in code, reference="t" if "2" in code else "normal")


@dataclass(frozen=True)
class SandwichResult:
    sigma_hat: np.ndarray
    fsa: FsaConfig
    weight_mode: str
    meat: np.ndarray
    bread_inverse: np.ndarray
    n: int
    p: int
    q: int
    weight_correction: tuple[np.ndarray, np.ndarray] | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.sigma_hat))

    @property
    def df(self) -> int:
        return self.n - self.p - self.q


def _pair_score_terms(fit: FitResult):
    c = fit.pair_c()
    rs, _ = fit.residual_sums()
    return c, rs


def cluster_scores(fit: FitResult) -> np.ndarray:
    """(n, q+p) array of ``U_i``, summing every consistent regimen."""
    c, rs = _pair_score_terms(fit)
    pairs = fit.pairs
    U = np.zeros((pairs.n, pairs.k))
    np.add.at(U, pairs.cluster, (pairs.w * c * rs)[:, None] * pairs.design)
    return U


def cluster_score(fit: FitResult, i: int) -> np.ndarray:
    return cluster_scores(fit)[i]


def leverages(fit: FitResult) -> np.ndarray:
    """(n, k, k) array of ``L_i = sum_a I W D'V^{-1}D (nB)^{-1}``."""
    pairs = fit.pairs
    c = fit.pair_c()
    d = pairs.design
    outer = (pairs.w * c * pairs.m)[:, None, None] * d[:, :, None] * d[:, None, :]
    A = np.zeros((pairs.n, pairs.k, pairs.k))
    np.add.at(A, pairs.cluster, outer)
    Ninv = np.linalg.inv(fit.bread * fit.n)
    return A @ Ninv


def bias_corrected_scores(fit: FitResult, U: np.ndarray | None = None) -> np.ndarray:
    """``(I - L_i)^{-1} U_i`` for every cluster."""
    U = cluster_scores(fit) if U is None else U
    k = U.shape[1]
    adj = np.eye(k) - leverages(fit)
    cond = np.linalg.cond(adj)
    bad = ~(cond <= LEVERAGE_COND_MAX)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        cid = fit.dataset.clusters[i].cluster_id if fit.dataset is not None else i
        raise SingularLeverageError(
            f"I - L is singular for cluster {cid!r} (condition {cond[i]:.3g})", cluster=cid
        )
    return np.linalg.solve(adj, U[:, :, None])[:, :, 0]


def weight_correction(fit: FitResult) -> tuple[np.ndarray, np.ndarray]:
    """``(C, F)``: mean score derivative in gamma and the logistic information."""
    engine = fit.weight_engine
    if not engine.estimated:
        raise ValueError("fit used known weights")
    ds, pairs = fit.dataset, fit.pairs
    cl = pairs.cluster
    c, rs = _pair_score_terms(fit)
    dw = engine.gamma_derivative(ds.a1[cl], ds.r[cl], ds.a2[cl])
    C = ((c * rs)[:, None] * pairs.design).T @ dw / pairs.n
    S = engine.scores(ds.a1, ds.r, ds.a2)
    F = S.T @ S / pairs.n
    if np.linalg.cond(F) > 1e12:
        raise np.linalg.LinAlgError("singular weight-model information matrix")
    return C, F


def _assemble(fit: FitResult, U: np.ndarray, fsa: FsaConfig, correct_weights: bool) -> SandwichResult:
    n = fit.n
    meat = U.T @ U / n
    Binv = np.linalg.inv(fit.bread)
    metadata = {}
    wc = None
    if correct_weights:
        C, F = weight_correction(fit)
        meat = meat - C @ np.linalg.solve(F, C.T)
        wc = (C, F)
        if fsa.bias_correct:
            metadata["composition"] = "weight-estimation correction subtracted from the bias-corrected meat"
    sigma = Binv @ meat @ Binv / n
    sigma = 0.5 * (sigma + sigma.T)
    diag = np.diag(sigma)
    if (diag < 0).any():
        warnings.warn("negative variance after weight correction clamped to 0", RuntimeWarning, stacklevel=3)
        sigma[np.diag_indices_from(sigma)] = np.maximum(diag, 0.0)
    pairs = fit.pairs
    scale = np.max(np.abs(pairs.w * fit.pair_c() * pairs.ysum)[:, None] * np.abs(pairs.design), initial=0.0)
    if np.max(np.abs(U), initial=0.0) <= 1e-10 * max(scale, 1e-300):
        metadata["degenerate"] = True
    res = SandwichResult(sigma, fsa, fit.weight_engine.mode, meat, Binv, n, fit.p, fit.q, wc, metadata)
    if fsa.dof_scale:
        res = fsa3_scale(res, n, fit.p, fit.q)
    return res


def sandwich_plain(fit: FitResult) -> SandwichResult:
    """``(1/n) B^{-1} M B^{-1}`` with ``M = P_n U U'``."""
    return _assemble(fit, cluster_scores(fit), FsaConfig(), correct_weights=False)


def sandwich_estimated_weights(fit: FitResult) -> SandwichResult:
    """Plain sandwich with the meat reduced by ``C F^{-1} C'``."""
    return _assemble(fit, cluster_scores(fit), FsaConfig(), correct_weights=True)


def fsa3_scale(sigma: SandwichResult, n: int, p: int, q: int) -> SandwichResult:
    df = n - p - q
    if df <= 0:
        raise ValueError(f"nonpositive degrees of freedom n - p - q = {df}")
    fsa = replace(sigma.fsa, dof_scale=True)
    return replace(sigma, sigma_hat=sigma.sigma_hat * (n / df), fsa=fsa)


def fsa4_bias_corrected(fit: FitResult, correct_weights: bool | None = None) -> SandwichResult:
    """Sandwich with ``M`` replaced by the mean of ``U~ U~'``."""
    if correct_weights is None:
        correct_weights = fit.weight_engine.estimated
    return _assemble(fit, bias_corrected_scores(fit), FsaConfig(bias_correct=True), correct_weights)


def sandwich(fit: FitResult, fsa: FsaConfig | str = FsaConfig(), correct_weights: bool | None = None,
             scores: np.ndarray | None = None, corrected_scores: np.ndarray | None = None) -> SandwichResult:
    """Variance under any FSA combination.

    ``correct_weights`` defaults to whether the fit estimated its weights.
    Precomputed plain or bias-corrected scores may be passed to avoid
    recomputation across variants.
    """
    fsa = resolve_fsa(fsa)
    if correct_weights is None:
        correct_weights = fit.weight_engine.estimated
    if fsa.bias_correct:
        U = bias_corrected_scores(fit, scores) if corrected_scores is None else corrected_scores
    else:
        U = cluster_scores(fit) if scores is None else scores
    return _assemble(fit, U, fsa, correct_weights)
