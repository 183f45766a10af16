"""Slow reference implementations used to cross-check the engine.

Nothing here reuses the engine's vectorized algebra: matrices are built
densely in extended precision, weights are recomputed from raw assignments,
derivatives come from complex-step differentiation and likelihoods are
maximized numerically. Only the covariance kernels used by the likelihood
(:func:`cs_log_det`, :func:`cs_inverse_apply`) are shared.
"""

from __future__ import annotations

from dataclasses import dataclass

import mpmath as mp
import numpy as np
from scipy.optimize import minimize, minimize_scalar

from . import sandwich as sw
from .covariance import RHO_MAX, cs_inverse_apply, cs_log_det
from .data import PATHWAYS, REGIMENS, ClusterRecord, TrialDataset
from .gee import FitConfig, FitResult, fit, fit_weighted_cs
from .simgen import regimen_moments_from_pathways

__all__ = [
    "OracleReport",
    "random_dataset",
    "dense_sandwich",
    "constrained_pml",
    "sigma2_profile_check",
    "mixture_moment_mc",
    "run_all",
]


@dataclass(frozen=True)
class OracleReport:
    label: str
    engine: float
    oracle: float
    abs_err: float
    rel_err: float
    tolerance: float
    passed: bool

    @classmethod
    def compare(cls, label, engine, oracle, tolerance, relative=True) -> "OracleReport":
        engine = np.asarray(engine, dtype=float)
        oracle = np.asarray(oracle, dtype=float)
        abs_err = float(np.max(np.abs(engine - oracle)))
        scale = max(1.0, float(np.max(np.abs(oracle))))
        rel_err = abs_err / scale
        err = rel_err if relative else abs_err
        return cls(label, float(np.max(np.abs(engine))), float(np.max(np.abs(oracle))),
                   abs_err, rel_err, tolerance, bool(err <= tolerance))

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.label}: abs {self.abs_err:.3g}, rel {self.rel_err:.3g} (tol {self.tolerance:g})"


def random_dataset(rng, n: int, m=(2, 4), p: int = 1, equal_m: bool = False) -> TrialDataset:
    """Small dataset with every pathway populated (requires ``n >= 6``)."""
    if n < 6:
        raise ValueError("need n >= 6 to populate all pathways")
    paths = list(range(6)) + list(rng.integers(0, 6, size=n - 6))
    rng.shuffle(paths)
    lo, hi = (m, m) if np.isscalar(m) else m
    m_common = int(rng.integers(lo, hi + 1))
    clusters = []
    for i, k in enumerate(paths):
        a1, r, a2 = PATHWAYS[k]
        mi = m_common if equal_m else int(rng.integers(lo, hi + 1))
        x = rng.standard_normal(p)
        shared = rng.standard_normal()
        y = 10 + a1 + (0.5 * a2 if a2 else 0) + x.sum() + shared + rng.standard_normal(mi)
        clusters.append(ClusterRecord(f"c{i}", x, a1, r, a2, y))
    return TrialDataset(tuple(clusters), tuple(f"x{j + 1}" for j in range(p)))


# dense assembly ------------------------------------------------------------

ORACLE_DPS = 40


def _mpm(a):
    """numpy array (1-D as a column) to an mpmath matrix."""
    a = np.asarray(a, dtype=float)
    return mp.matrix(a.reshape(-1, 1).tolist() if a.ndim == 1 else a.tolist())


def _raw_weight(a1, r, a2, gamma, estimated):
    """IPW weight from raw assignments; ``gamma`` may be complex."""
    if not estimated:
        return mp.mpf(2) if r == 1 else mp.mpf(4)
    q1 = 1 / (1 + mp.exp(-gamma[0]))
    q2 = 1 / (1 + mp.exp(-gamma[1]))
    w = 1 / (q1 if a1 == 1 else 1 - q1)
    if r == 0:
        w = w / (q2 if a2 == 1 else 1 - q2)
    return w


def _loglik_weights(ds, gamma):
    q1 = 1 / (1 + mp.exp(-gamma[0]))
    q2 = 1 / (1 + mp.exp(-gamma[1]))
    out = []
    for c in ds.clusters:
        ll = mp.log(q1) if c.a1 == 1 else mp.log(1 - q1)
        if c.r == 0:
            ll = ll + (mp.log(q2) if c.a2 == 1 else mp.log(1 - q2))
        out.append(ll)
    return out


def _mle_gamma(ds):
    a1 = [c.a1 for c in ds.clusters]
    nr = [c.a2 for c in ds.clusters if c.r == 0]
    p1 = mp.mpf(a1.count(1)) / len(a1)
    p2 = mp.mpf(nr.count(1)) / len(nr)
    return [mp.log(p1 / (1 - p1)), mp.log(p2 / (1 - p2))]


def _dense_blocks(ds, centering, sigma2, rho, gamma, estimated):
    """Per-cluster lists of (W, D, Vinv, y) for every consistent regimen."""
    blocks = []
    for c in ds.clusters:
        xc = np.asarray(c.x, dtype=float) - np.asarray(centering, dtype=float)
        items = []
        for g, (a1, a2) in enumerate(REGIMENS):
            if c.a1 != a1 or (c.r == 0 and c.a2 != a2):
                continue
            row = np.concatenate([[1.0, a1, a2, a1 * a2], xc])
            D = _mpm(np.tile(row, (c.m, 1)))
            s2, r = mp.mpf(float(sigma2[g])), mp.mpf(float(rho[g]))
            V = mp.matrix(c.m, c.m)
            for i in range(c.m):
                for j in range(c.m):
                    V[i, j] = s2 if i == j else s2 * r
            W = _raw_weight(c.a1, c.r, c.a2, gamma, estimated)
            items.append((W, D, mp.inverse(V), _mpm(c.y)))
        blocks.append(items)
    return blocks


def _dense_scores(blocks, theta):
    return [sum((W * D.T * Vi * (y - D * theta) for W, D, Vi, y in items), mp.zeros(theta.rows, 1))
            for items in blocks]


def _bias_corrected(blocks, theta, Ninv):
    k = theta.rows
    adjusted = []
    for items in blocks:
        sizes = [D.rows for _, D, _, _ in items]
        offs = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
        tot = int(offs[-1])
        G = mp.zeros(k, tot)
        Mx = mp.zeros(tot, tot)
        for a, (Wa, Da, Via, _) in enumerate(items):
            DaV = Da.T * Via
            for i in range(k):
                for j in range(sizes[a]):
                    G[i, offs[a] + j] = DaV[i, j]
            for b, (Wb, Db, _, _) in enumerate(items):
                blk = Wb * Db * Ninv * DaV
                for i in range(sizes[b]):
                    for j in range(sizes[a]):
                        Mx[offs[b] + i, offs[a] + j] = blk[i, j]
        Qall = G * mp.inverse(mp.eye(tot) - Mx)
        u = mp.zeros(k, 1)
        for a, (Wa, Da, _, y) in enumerate(items):
            Qa = Qall[:, int(offs[a]):int(offs[a + 1])]
            u += Wa * Qa * (y - Da * theta)
        adjusted.append(u)
    return adjusted


def dense_sandwich(ds: TrialDataset, fit_result: FitResult, dof_scale=False, bias_correct=False,
                   correct_weights=None) -> np.ndarray:
    """Sandwich assembled from explicit dense ``D``, ``V`` and ``V^{-1}``.

    Runs in 40-digit arithmetic: at the ``rho`` clamp ``V`` has condition
    number near 1e8, beyond what float64 or x87 long double can absorb at
    the 1e-10 comparison tolerance. The bias correction solves, per
    cluster, the linear system

        Q_a - sum_b W_b Q_b D_b (nB)^{-1} D_a' V_a^{-1} = D_a' V_a^{-1}

    for the matrices ``Q_a`` and uses ``sum_a W_a Q_a r_a`` as the score.
    Weight-model derivatives use the complex step.
    """
    with mp.workdps(ORACLE_DPS):
        theta = _mpm(fit_result.theta)
        sigma2, rho = fit_result.covariance.arrays()
        estimated = fit_result.weight_engine.estimated
        if correct_weights is None:
            correct_weights = estimated
        gamma = _mle_gamma(ds) if estimated else [mp.mpf(0), mp.mpf(0)]
        centering = fit_result.model.centering
        blocks = _dense_blocks(ds, centering, sigma2, rho, gamma, estimated)
        n, k = ds.n, theta.rows
        N = mp.zeros(k, k)
        for items in blocks:
            for W, D, Vi, _ in items:
                N += W * D.T * Vi * D
        Ninv = mp.inverse(N)
        scores = _bias_corrected(blocks, theta, Ninv) if bias_correct else _dense_scores(blocks, theta)
        meat = mp.zeros(k, k)
        for u in scores:
            meat += u * u.T
        meat /= n
        if correct_weights:
            h = mp.mpf(10) ** -30
            C = mp.zeros(k, 2)
            S = mp.zeros(n, 2)
            for j in range(2):
                gz = [mp.mpc(g) for g in gamma]
                gz[j] += 1j * h
                bz = _dense_blocks(ds, centering, sigma2, rho, gz, True)
                total = sum(_dense_scores(bz, theta), mp.zeros(k, 1))
                for i in range(k):
                    C[i, j] = mp.im(total[i]) / h / n
                for i, ll in enumerate(_loglik_weights(ds, gz)):
                    S[i, j] = mp.im(ll) / h
            F = S.T * S / n
            meat = meat - C * mp.inverse(F) * C.T
        Binv = mp.inverse(N / n)
        sigma = Binv * meat * Binv / n
        out = np.array((0.5 * (sigma + sigma.T)).tolist(), dtype=float)
    out[np.diag_indices_from(out)] = np.maximum(np.diag(out), 0.0)
    if dof_scale:
        out = out * n / (n - k)
    return out


# constrained pseudo-likelihood --------------------------------------------

def _weighted_loglik(params, X, Y, w):
    k = X.shape[1]
    theta, log_s2, rho = params[:k], params[k], params[k + 1]
    s2 = np.exp(log_s2)
    m = Y.shape[1]
    ll = 0.0
    for xi, yi, wi in zip(X, Y, w):
        r = yi - xi @ theta
        ll += wi * (-0.5 * cs_log_det(m, s2, rho) - 0.5 * r @ cs_inverse_apply(m, s2, rho, r))
    return ll


def _weighted_loglik_grad(params, X, Y, w):
    k = X.shape[1]
    theta, log_s2, rho = params[:k], params[k], params[k + 1]
    s2 = np.exp(log_s2)
    m = Y.shape[1]
    g = np.zeros(k + 2)
    lam = 1.0 + (m - 1) * rho
    for xi, yi, wi in zip(X, Y, w):
        r = yi - xi @ theta
        vr = cs_inverse_apply(m, s2, rho, r)
        g[:k] += wi * vr.sum() * xi
        quad = r @ vr
        g[k] += wi * (-0.5 * m + 0.5 * quad)
        ssq, tot = r @ r, r.sum()
        # d/d rho of r'(CS)^{-1} r and log det, with CS^{-1} = (I - rho/lam J)/(1-rho)
        dq = (ssq - rho / lam * tot**2) / (1 - rho) ** 2 - (tot**2 / lam**2) / (1 - rho)
        dlogdet = -(m - 1) / (1 - rho) + (m - 1) / lam
        g[k + 1] += wi * (-0.5 * dlogdet - 0.5 * dq / s2)
    return g


def constrained_pml(X, Y, weights, starts: int = 6, seed: int = 0):
    """Maximize the weighted Gaussian CS log-likelihood with ``0 <= rho < 1``.

    ``X`` holds one design row per cluster and ``Y`` the equal-size outcome
    vectors. Returns ``(theta, sigma2, rho)`` of the best of several starts.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    w = np.asarray(weights, dtype=float) * np.ones(len(Y))
    k = X.shape[1]
    rng = np.random.default_rng(seed)
    theta0 = np.linalg.lstsq(X, Y.mean(axis=1), rcond=None)[0]
    s0 = np.log(np.var(Y - (X @ theta0)[:, None]) + 1e-12)
    bounds = [(None, None)] * k + [(None, None), (0.0, RHO_MAX)]
    best = None
    for s in range(starts):
        x0 = np.concatenate([theta0 + (rng.standard_normal(k) if s else 0.0),
                             [s0 + (rng.normal() if s else 0.0), [0.0, 0.3, 0.6, 0.9, 0.1, 0.5][s % 6]]])
        res = minimize(lambda p: -_weighted_loglik(p, X, Y, w), x0,
                       jac=lambda p: -_weighted_loglik_grad(p, X, Y, w),
                       method="L-BFGS-B", bounds=bounds,
                       options={"ftol": 1e-15, "gtol": 1e-11, "maxiter": 20000, "maxcor": 30})
        if best is None or res.fun < best.fun:
            best = res
    if not np.all(np.isfinite(best.x)):
        raise RuntimeError("pseudo-likelihood optimization failed")
    return best.x[:k], float(np.exp(best.x[k])), float(best.x[k + 1])


def sigma2_profile_check(X, Y, weights, theta, rho):
    """Closed-form profile ``sigma2`` against a 1-D numerical argmax."""
    X, Y = np.atleast_2d(X), np.atleast_2d(Y)
    w = np.asarray(weights, dtype=float) * np.ones(len(Y))
    m = Y.shape[1]
    quad = sum(wi * (y - x @ theta) @ cs_inverse_apply(m, 1.0, rho, y - x @ theta) for x, y, wi in zip(X, Y, w))
    closed = quad / (m * w.sum())
    res = minimize_scalar(
        lambda ls: -_weighted_loglik(np.concatenate([theta, [ls, rho]]), X, Y, w),
        bracket=(np.log(closed) - 1, np.log(closed) + 1), tol=1e-12,
    )
    return closed, float(np.exp(res.x))


# mixture moments ------------------------------------------------------------

def mixture_moment_mc(p, mu1, mu2, s1, s2, rho1, rho2, draws: int = 200_000, m: int = 4,
                      seed: int = 0, batches: int = 50):
    """Monte Carlo mean, variance and ICC of the two-branch cluster mixture.

    Returns ``(estimates, standard_errors)`` using batch means.
    """
    if draws < 10_000:
        raise ValueError("need at least 10^4 draws")
    rng = np.random.default_rng(seed)
    branch = rng.random(draws) < p
    mu = np.where(branch, mu1, mu2)
    s = np.where(branch, s1, s2)
    rho = np.where(branch, rho1, rho2)
    y = mu[:, None] + np.sqrt(s)[:, None] * (
        np.sqrt(rho)[:, None] * rng.standard_normal((draws, 1))
        + np.sqrt(1 - rho)[:, None] * rng.standard_normal((draws, m))
    )
    grand = y.mean()
    r = y - grand
    var_c = (r**2).mean(axis=1)
    cov_c = (r.sum(axis=1) ** 2 - (r**2).sum(axis=1)) / (m * (m - 1))
    per = np.column_stack([y.mean(axis=1), var_c, cov_c])
    bm = per[: draws - draws % batches].reshape(batches, -1, 3).mean(axis=1)
    est = per.mean(axis=0)
    se = bm.std(axis=0, ddof=1) / np.sqrt(batches)
    icc = est[2] / est[1]
    # delta-method standard error of the ratio, from the batch means
    ratio = bm[:, 2] / bm[:, 1]
    icc_se = ratio.std(ddof=1) / np.sqrt(batches)
    return np.array([est[0], est[1], icc]), np.array([se[0], se[1], icc_se])


# suite --------------------------------------------------------------------------

def _variant_checks(ds, f, tag, tol=1e-10):
    out = []
    for dof in (False, True):
        for bias in (False, True):
            fsa = sw.FsaConfig(dof_scale=dof, bias_correct=bias)
            engine = sw.sandwich(f, fsa).sigma_hat
            oracle = dense_sandwich(ds, f, dof_scale=dof, bias_correct=bias)
            out.append(OracleReport.compare(f"dense sandwich [{tag}, {fsa.label}]", engine, oracle, tol))
    return out


def run_all(seed: int = 0, instances: int = 5) -> list[OracleReport]:
    """Every oracle check at test scale."""
    rng = np.random.default_rng(seed)
    reports: list[OracleReport] = []
    for t in range(instances):
        n = int(rng.integers(6, 9))
        ds = random_dataset(rng, n, m=(1, 4), p=int(rng.integers(0, 2)))
        for weights in ("known", "estimated"):
            f = fit(ds, FitConfig(weights=weights))
            reports += _variant_checks(ds, f, f"instance {t}, {weights} weights")

    # constrained pseudo-MLE on single-regimen data
    for t in range(instances):
        nc, m = 6, 4
        X = np.column_stack([np.ones(nc), rng.standard_normal(nc)])
        Y = (X @ [5.0, 1.0])[:, None] + rng.normal(size=(nc, 1)) * rng.uniform(0, 1.5) + rng.standard_normal((nc, m))
        w = rng.choice([2.0, 4.0], size=nc)
        g = fit_weighted_cs(X, Y, w)
        theta, s2, rho = constrained_pml(X, Y, w, seed=t)
        engine = np.concatenate([g.theta, [g.sigma2[0], g.rho[0]]])
        oracle = np.concatenate([theta, [s2, rho]])
        reports.append(OracleReport.compare(f"constrained PML, instance {t}", engine, oracle, 1e-5))
        closed, numeric = sigma2_profile_check(X, Y, w, g.theta, g.rho[0])
        reports.append(OracleReport.compare(f"sigma2 profile, instance {t}", closed, numeric, 1e-6))

    # mixture moments
    for args in [(0.5, 2.0, 0.0, 1.0, 1.0, 0.2, 0.2), (0.3, 1.0, -1.0, 2.0, 0.5, 0.1, 0.4)]:
        exact = np.array(regimen_moments_from_pathways(*args))
        est, se = mixture_moment_mc(*args, seed=seed)
        z = np.max(np.abs(est - exact) / se)
        reports.append(OracleReport(f"mixture moments p={args[0]} (max |z|)", float(np.max(est)),
                                    float(np.max(exact)), float(np.max(np.abs(est - exact))), float(z),
                                    4.0, bool(z <= 4.0)))

    # no-covariate identities
    for t in range(instances):
        ds = random_dataset(rng, int(rng.integers(6, 13)), m=int(rng.integers(2, 7)), p=0, equal_m=True)
        fi = fit(ds, FitConfig(structure="independence"))
        fe = fit(ds, FitConfig(structure="exchangeable"))
        reports.append(OracleReport.compare(f"beta rho-free, instance {t}", fe.theta, fi.theta, 1e-8))
        for bias in (False, True):
            fsa = sw.FsaConfig(bias_correct=bias)
            reports.append(OracleReport.compare(
                f"sandwich rho-free [{fsa.label}], instance {t}",
                sw.sandwich(fe, fsa).sigma_hat, sw.sandwich(fi, fsa).sigma_hat, 1e-8))
        U = sw.cluster_scores(fe)
        Ut = sw.bias_corrected_scores(fe, U)
        factor = _leverage_factors(fe)
        reports.append(OracleReport.compare(f"leverage factor omega/(omega - W), instance {t}",
                                            Ut @ _MU_T_INV_T.T, factor * (U @ _MU_T_INV_T.T), 1e-8))
    return reports


# per-regimen-mean parameterization: mu = T beta, so U_mu = T^{-T} U_beta
_MU_T = np.array([[1.0, a1, a2, a1 * a2] for a1, a2 in REGIMENS])
_MU_T_INV_T = np.linalg.inv(_MU_T).T


def _leverage_factors(f: FitResult) -> np.ndarray:
    """(n, 4) factors ``omega_a / (omega_a - W_i)`` (1 where inconsistent)."""
    pairs = f.pairs
    omega = np.bincount(pairs.group, weights=pairs.w, minlength=4)
    out = np.ones((pairs.n, 4))
    out[pairs.cluster, pairs.group] = omega[pairs.group] / (omega[pairs.group] - pairs.w)
    return out
