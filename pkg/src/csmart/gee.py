"""Weighted-and-replicated GEE for the marginal mean model

    mu(a1, a2, X) = b0 + b1 a1 + b2 a2 + b3 a1 a2 + eta' (X - mean X)

with a working ``sigma2 CS(rho)`` covariance per regimen, fitted by
alternating a weighted least-squares step with moment updates of
``(sigma2, rho)``.

Each cluster contributes one "pair" per regimen it is consistent with.
Because the design row is shared by all members of a cluster, every
``D' V^{-1} D`` and ``D' V^{-1} r`` term collapses to scalar cluster sums
times ``d d'`` or ``d``, so a fit costs O(number of pairs) per iteration.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .covariance import (
    RHO_MAX,
    IccMode,
    Structure,
    VarianceMode,
    WorkingCovariance,
    one_vinv_one,
)
from .data import REGIMENS, EmbeddedAI, TrialDataset, validate_design
from .weights import KNOWN, WeightEngine, fit_weights

__all__ = [
    "Q",
    "CAUSAL_NAMES",
    "FitConfig",
    "MeanModel",
    "FitResult",
    "Pairs",
    "ConvergenceError",
    "RankDeficiencyError",
    "DesignError",
    "build_design_row",
    "build_pairs",
    "solve_wls",
    "update_covariance",
    "cs_moment_update",
    "fit",
    "fit_pairs",
    "fit_weighted_cs",
    "WeightedCSFit",
]

Q = 4
CAUSAL_NAMES = ("intercept", "a1", "a2", "a1:a2")


class ConvergenceError(RuntimeError):
    def __init__(self, message, theta=None, change=None):
        super().__init__(message)
        self.theta = theta
        self.change = change


class RankDeficiencyError(np.linalg.LinAlgError):
    pass


class DesignError(ValueError):
    def __init__(self, report):
        super().__init__(str(report))
        self.report = report


@dataclass(frozen=True)
class FitConfig:
    structure: str = "exchangeable"
    variance_mode: str = "per_regimen"
    icc_mode: str = "per_regimen"
    weights: str = "known"
    tol: float = 1e-8
    max_iter: int = 100

    def __post_init__(self):
        Structure(self.structure), VarianceMode(self.variance_mode), IccMode(self.icc_mode)
        if self.weights not in ("known", "estimated"):
            raise ValueError(f"unknown weight mode {self.weights!r}")


@dataclass(frozen=True)
class MeanModel:
    beta: np.ndarray
    eta: np.ndarray
    centering: np.ndarray
    covariate_names: tuple[str, ...] = ()

    @property
    def q(self) -> int:
        return Q

    @property
    def p(self) -> int:
        return len(self.eta)

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate([self.beta, self.eta])

    @property
    def names(self) -> tuple[str, ...]:
        return CAUSAL_NAMES + tuple(self.covariate_names)

    def mean(self, ai: EmbeddedAI, x) -> float:
        xc = np.asarray(x, dtype=float) - self.centering
        return float(build_design_row(ai, xc) @ self.theta)


def build_design_row(ai: EmbeddedAI, x_centered=()) -> np.ndarray:
    a1, a2 = ai
    return np.concatenate([[1.0, a1, a2, a1 * a2], np.asarray(x_centered, dtype=float)])


@dataclass(frozen=True)
class Pairs:
    """Consistent (cluster, group) pairs with the sums the CS algebra needs."""

    cluster: np.ndarray
    group: np.ndarray
    w: np.ndarray
    m: np.ndarray
    ysum: np.ndarray
    ysumsq: np.ndarray
    design: np.ndarray
    n: int
    n_groups: int
    names: tuple[str, ...] = ()

    @property
    def k(self) -> int:
        return self.design.shape[1]

    def replace_design(self, design) -> "Pairs":
        return Pairs(self.cluster, self.group, self.w, self.m, self.ysum, self.ysumsq,
                     np.asarray(design, dtype=float), self.n, self.n_groups, self.names)


def build_pairs(ds: TrialDataset, engine: WeightEngine, centering=None) -> Pairs:
    if centering is None:
        centering = ds.x.mean(axis=0) if ds.p else np.zeros(0)
    xc = ds.x - centering
    cl, g = np.nonzero(ds.indicator)
    regs = np.array(REGIMENS, dtype=float)
    a1, a2 = regs[g, 0], regs[g, 1]
    design = np.column_stack([np.ones_like(a1), a1, a2, a1 * a2, xc[cl]])
    w = engine.weights(ds.a1[cl], ds.r[cl], ds.a2[cl])
    return Pairs(
        cluster=cl,
        group=g,
        w=np.asarray(w, dtype=float),
        m=ds.sizes[cl].astype(float),
        ysum=ds.ysum[cl],
        ysumsq=ds.ysumsq[cl],
        design=design,
        n=ds.n,
        n_groups=len(REGIMENS),
        names=CAUSAL_NAMES + tuple(ds.covariate_names),
    )


def _pair_c(pairs: Pairs, sigma2, rho) -> np.ndarray:
    return one_vinv_one(pairs.m, np.asarray(sigma2)[pairs.group], np.asarray(rho)[pairs.group])


def normal_system(pairs: Pairs, sigma2, rho):
    """``sum w D'V^{-1}D`` (= n B) and ``sum w D'V^{-1}Y``."""
    c = _pair_c(pairs, sigma2, rho)
    d = pairs.design
    N = (d * (pairs.w * c * pairs.m)[:, None]).T @ d
    rhs = d.T @ (pairs.w * c * pairs.ysum)
    return N, rhs


def _solve_spd(N, rhs, names=()):
    N = 0.5 * (N + N.T)
    try:
        factor = scipy.linalg.cho_factor(N)
        cond = np.linalg.cond(N)
    except (np.linalg.LinAlgError, ValueError):
        cond = np.inf
    if not np.isfinite(cond) or cond > 1e14:
        vals, vecs = np.linalg.eigh(N)
        null = vecs[:, 0]
        labels = names if len(names) == len(null) else [f"theta[{j}]" for j in range(len(null))]
        big = np.abs(null) > 0.1 * np.abs(null).max()
        combo = " + ".join(f"{null[j]:.3g}*{labels[j]}" for j in np.flatnonzero(big))
        raise RankDeficiencyError(
            f"singular normal matrix (condition {cond:.3g}); not identified: {combo}"
        )
    return scipy.linalg.cho_solve(factor, rhs), cond


def residual_sums(pairs: Pairs, theta):
    """Per-pair ``sum_j r_ij`` and ``sum_j r_ij^2``."""
    mu = pairs.design @ theta
    rs = pairs.ysum - pairs.m * mu
    rss = pairs.ysumsq - 2.0 * mu * pairs.ysum + pairs.m * mu * mu
    return rs, np.maximum(rss, 0.0)


def cs_moment_update(w, group, m, rs, rss, n_groups, structure="exchangeable",
                     variance_mode="per_regimen", icc_mode="per_regimen", diagnostics=None):
    """Weighted moment estimates of ``(sigma2, rho)`` from residual sums.

    ``rho`` is truncated below at 0 and above at ``RHO_MAX``.
    """
    structure, variance_mode, icc_mode = Structure(structure), VarianceMode(variance_mode), IccMode(icc_mode)
    w, group, m, rs, rss = (np.asarray(a, dtype=float) for a in (w, group, m, rs, rss))
    group = group.astype(int)
    diagnostics = [] if diagnostics is None else diagnostics

    def gsum(values):
        return np.bincount(group, weights=values, minlength=n_groups)

    ss_num, ss_den = gsum(w * rss), gsum(w * m)
    if variance_mode is VarianceMode.homogeneous:
        pooled = ss_num.sum() / ss_den.sum()
        sigma2 = np.full(n_groups, pooled)
    else:
        with np.errstate(invalid="ignore", divide="ignore"):
            sigma2 = ss_num / ss_den
        pooled = ss_num.sum() / ss_den.sum() if ss_den.sum() > 0 else np.nan
    present = ss_den > 0
    bad = ~(sigma2 > 0)
    if bad.any():
        fill = pooled if pooled > 0 else 1.0
        if (bad & present).any():
            diagnostics.append(f"zero residual variance in groups {np.flatnonzero(bad & present).tolist()}; "
                               f"using {fill:.3g}")
        sigma2 = np.where(bad, fill, sigma2)

    if structure is Structure.independence:
        return sigma2, np.zeros(n_groups)

    cross = gsum(w * (rs * rs - rss))
    pair_den = gsum(w * m * (m - 1.0))
    if icc_mode is IccMode.shared:
        den = pair_den.sum()
        if den <= 0:
            diagnostics.append("all clusters have m = 1; rho set to 0")
            return sigma2, np.zeros(n_groups)
        rho = np.full(n_groups, np.sum(cross / sigma2) / den)
    else:
        rho = np.zeros(n_groups)
        ok = pair_den > 0
        if (~ok & present).any():
            diagnostics.append(f"groups {np.flatnonzero(~ok & present).tolist()} have only m = 1 clusters; rho set to 0")
        rho[ok] = cross[ok] / (sigma2[ok] * pair_den[ok])
    return sigma2, np.clip(rho, 0.0, RHO_MAX)


@dataclass
class WeightedCSFit:
    theta: np.ndarray
    sigma2: np.ndarray
    rho: np.ndarray
    N: np.ndarray
    iterations: int
    converged: bool
    cond: float
    diagnostics: list


def fit_pairs(pairs: Pairs, structure="exchangeable", variance_mode="per_regimen",
              icc_mode="per_regimen", tol=1e-8, max_iter=100) -> WeightedCSFit:
    """Alternate WLS and moment updates from ``sigma2 = 1, rho = 0``."""
    G = pairs.n_groups
    sigma2, rho = np.ones(G), np.zeros(G)
    diagnostics: list[str] = []
    theta, cond = _solve_spd(*normal_system(pairs, sigma2, rho), pairs.names)
    change = np.inf
    for it in range(1, max_iter + 1):
        rs, rss = residual_sums(pairs, theta)
        step_diag: list[str] = []
        sigma2, rho = cs_moment_update(pairs.w, pairs.group, pairs.m, rs, rss, G,
                                       structure, variance_mode, icc_mode, step_diag)
        new, cond = _solve_spd(*normal_system(pairs, sigma2, rho), pairs.names)
        change = float(np.max(np.abs(new - theta)))
        theta = new
        if change <= tol:
            diagnostics.extend(step_diag)
            break
    else:
        raise ConvergenceError(
            f"no convergence after {max_iter} iterations (last change {change:.3g})",
            theta=theta, change=change,
        )
    N, _ = normal_system(pairs, sigma2, rho)
    return WeightedCSFit(theta, sigma2, rho, N, it, True, cond, diagnostics)


def fit_weighted_cs(design, outcomes, weights, groups=None, n_clusters=None, cluster=None,
                    structure="exchangeable", variance_mode="per_regimen", icc_mode="per_regimen",
                    tol=1e-8, max_iter=100, names=()) -> WeightedCSFit:
    """Fit from explicit cluster-level design rows.

    Row ``j`` of ``design`` applies to every member of ``outcomes[j]``;
    ``groups`` indexes the working-covariance group of each row.
    """
    design = np.atleast_2d(np.asarray(design, dtype=float))
    ys = [np.asarray(y, dtype=float).reshape(-1) for y in outcomes]
    P = len(ys)
    groups = np.zeros(P, dtype=int) if groups is None else np.asarray(groups, dtype=int)
    cluster = np.arange(P) if cluster is None else np.asarray(cluster, dtype=int)
    pairs = Pairs(
        cluster=cluster,
        group=groups,
        w=np.asarray(weights, dtype=float) * np.ones(P),
        m=np.array([y.size for y in ys], dtype=float),
        ysum=np.array([y.sum() for y in ys]),
        ysumsq=np.array([y @ y for y in ys]),
        design=design,
        n=int(cluster.max()) + 1 if n_clusters is None else n_clusters,
        n_groups=int(groups.max()) + 1,
        names=tuple(names),
    )
    return fit_pairs(pairs, structure, variance_mode, icc_mode, tol, max_iter)


@dataclass(frozen=True)
class FitResult:
    model: MeanModel
    covariance: WorkingCovariance
    weight_engine: WeightEngine
    iterations: int
    converged: bool
    bread: np.ndarray
    pairs: Pairs = field(repr=False)
    n: int = 0
    condition: float = np.nan
    diagnostics: tuple[str, ...] = ()
    config: FitConfig = FitConfig()
    dataset: TrialDataset | None = field(default=None, repr=False)

    @property
    def theta(self) -> np.ndarray:
        return self.model.theta

    @property
    def q(self) -> int:
        return Q

    @property
    def p(self) -> int:
        return self.model.p

    def pair_c(self) -> np.ndarray:
        s, r = self.covariance.arrays()
        return _pair_c(self.pairs, s, r)

    def residual_sums(self):
        return residual_sums(self.pairs, self.theta)

    def residuals(self, i: int) -> dict[EmbeddedAI, np.ndarray]:
        """Residual vectors of cluster ``i`` for each regimen it is consistent with."""
        if self.dataset is None:
            raise ValueError("fit was created without a dataset")
        rec = self.dataset.clusters[i]
        out = {}
        for j in np.flatnonzero(self.pairs.cluster == i):
            ai = REGIMENS[self.pairs.group[j]]
            out[ai] = rec.y - self.pairs.design[j] @ self.theta
        return out


def _covariance_from(config: FitConfig, sigma2, rho) -> WorkingCovariance:
    return WorkingCovariance(config.structure, config.variance_mode, config.icc_mode).with_values(sigma2, rho)


def fit(ds: TrialDataset, config: FitConfig | None = None, check_design: bool = True,
        warn: bool = True, **kwargs) -> FitResult:
    """Fit the marginal mean model.

    Raises ``DesignError`` if :func:`validate_design` fails (skipped when
    ``check_design`` is false, leaving identifiability to the solver),
    ``RankDeficiencyError`` for a singular normal matrix and
    ``ConvergenceError`` after ``max_iter`` iterations.
    """
    config = config or FitConfig(**kwargs)
    if check_design:
        report = validate_design(ds)
        if not report.ok:
            raise DesignError(report)
    engine = fit_weights(ds) if config.weights == "estimated" else KNOWN
    centering = ds.x.mean(axis=0) if ds.p else np.zeros(0)
    pairs = build_pairs(ds, engine, centering)
    res = fit_pairs(pairs, config.structure, config.variance_mode, config.icc_mode,
                    config.tol, config.max_iter)
    model = MeanModel(res.theta[:Q].copy(), res.theta[Q:].copy(), centering, ds.covariate_names)
    if res.cond > 1e10:
        res.diagnostics.append(f"normal matrix condition number {res.cond:.3g}")
    for msg in res.diagnostics if warn else ():
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return FitResult(
        model=model,
        covariance=_covariance_from(config, res.sigma2, res.rho),
        weight_engine=engine,
        iterations=res.iterations,
        converged=res.converged,
        bread=res.N / ds.n,
        pairs=pairs,
        n=ds.n,
        condition=res.cond,
        diagnostics=tuple(res.diagnostics),
        config=config,
        dataset=ds,
    )


def solve_wls(ds: TrialDataset, weight_engine: WeightEngine = KNOWN,
              covariance: WorkingCovariance | None = None):
    """One weighted least-squares solve with fixed working covariance."""
    covariance = covariance or WorkingCovariance()
    pairs = build_pairs(ds, weight_engine)
    theta, _ = _solve_spd(*normal_system(pairs, *covariance.arrays()), pairs.names)
    return theta[:Q], theta[Q:]


def update_covariance(residuals, covariance: WorkingCovariance | None = None):
    """Moment update from explicit residual vectors.

    ``residuals`` is an iterable of ``(regimen, weight, residual_vector)``
    triples, one per consistent (cluster, regimen) pair.
    """
    covariance = covariance or WorkingCovariance()
    g, w, m, rs, rss = [], [], [], [], []
    for ai, wt, r in residuals:
        r = np.asarray(r, dtype=float)
        g.append(REGIMENS.index(EmbeddedAI(*ai)))
        w.append(wt)
        m.append(r.size)
        rs.append(r.sum())
        rss.append(r @ r)
    diag: list[str] = []
    sigma2, rho = cs_moment_update(w, g, m, rs, rss, len(REGIMENS), covariance.structure,
                                   covariance.variance_mode, covariance.icc_mode, diag)
    present = np.bincount(g, minlength=len(REGIMENS)) > 0
    sigma2 = np.where(present, sigma2, 1.0)
    for msg in diag:
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return covariance.with_values(sigma2, rho)
