"""Synthetic cSMART trials with targeted marginal moments.

Each regimen's outcome is a two-branch mixture over response status.
Responders never receive a second-stage option, so their conditional mean
can depend on ``a1`` only: it is the a2-averaged mean plus a shift
``(1 - kappa) omega0``. Non-responders carry the second-stage effect. The
branch covariances are chosen so that every regimen has mean
``mu(a1, a2, X)``, residual variance ``sigma2_marg`` and ICC ``icc``
given X, using the mixture identities

    mu     = p mu1 + (1 - p) mu2
    sigma2 = p s1 + (1 - p) s2 + p (1 - p) (mu1 - mu2)^2
    rho    = (p s1 rho1 + (1 - p) s2 rho2 + p (1 - p) (mu1 - mu2)^2) / sigma2
"""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit, logit

from .data import ClusterRecord, EmbeddedAI, TrialDataset

__all__ = [
    "DEFAULT_BETA",
    "FeasibilityError",
    "GenerativeSpec",
    "DesignPoint",
    "SimulationDesign",
    "regimen_moments_from_pathways",
    "branch_moments",
    "conditional_moments",
    "generate_trial",
    "spec_from_design",
    "replication_rng",
]

DEFAULT_BETA = (30.0, 1.0, 0.75, 0.5)
EFFECT = 3.5
_X_RANGE = 8.3


class FeasibilityError(ValueError):
    pass


def regimen_moments_from_pathways(p, mu1, mu2, s1, s2, rho1, rho2):
    """Mean, variance and ICC of a two-branch mixture of CS clusters."""
    if not 0 <= p <= 1:
        raise ValueError("p must lie in [0, 1]")
    between = p * (1 - p) * (mu1 - mu2) ** 2
    mu = p * mu1 + (1 - p) * mu2
    sigma2 = p * s1 + (1 - p) * s2 + between
    rho = (p * s1 * rho1 + (1 - p) * s2 * rho2 + between) / sigma2
    return mu, sigma2, rho


def branch_moments(mu, omega, kappa, sigma2, rho):
    """Split one regimen into branches separated by ``omega``.

    Returns ``(xi_responder, xi_nonresponder, tau2, rho_c)`` with a common
    conditional covariance ``tau2 CS(rho_c)`` in both branches.
    """
    between = kappa * (1 - kappa) * omega**2
    tau2 = sigma2 - between
    if tau2 <= 0:
        raise FeasibilityError(f"kappa(1-kappa)omega^2 = {between:.6g} >= sigma2_marg = {sigma2:.6g}")
    rho_c = (rho * sigma2 - between) / tau2
    if rho_c < 0:
        raise FeasibilityError(
            f"kappa(1-kappa)omega^2 = {between:.6g} exceeds icc*sigma2_marg = {rho * sigma2:.6g}"
        )
    return mu + (1 - kappa) * omega, mu - kappa * omega, tau2, rho_c


def _int_keys(d):
    return {int(k): float(v) for k, v in d.items()}


@dataclass(frozen=True)
class GenerativeSpec:
    """Inputs of one simulated trial.

    ``response_effect[a1]`` is the responder shift ``omega0``; the
    per-regimen responder/non-responder gap is derived from it and the
    second-stage effect.
    """

    n: int
    cluster_sizes: int | tuple[int, int] = 5
    beta_true: tuple[float, ...] = DEFAULT_BETA
    eta_true: tuple[float, ...] = ()
    sd_y: float = 7.0
    icc: float = 0.1
    response_rate: dict = field(default_factory=lambda: {1: 0.5, -1: 0.5})
    response_effect: dict = field(default_factory=lambda: {1: 0.0, -1: 0.0})
    seed: int = 0
    response_model: str = "constant"
    response_slope: float = 0.0

    def __post_init__(self):
        sizes = self.cluster_sizes
        if isinstance(sizes, (list, tuple)):
            sizes = tuple(int(s) for s in sizes)
            if len(sizes) != 2 or not 1 <= sizes[0] <= sizes[1]:
                raise ValueError(f"cluster size range must be [lo, hi] with 1 <= lo <= hi, got {sizes}")
        else:
            sizes = int(sizes)
            if sizes < 1:
                raise ValueError("cluster size must be >= 1")
        object.__setattr__(self, "cluster_sizes", sizes)
        object.__setattr__(self, "beta_true", tuple(float(b) for b in self.beta_true))
        object.__setattr__(self, "eta_true", tuple(float(e) for e in self.eta_true))
        object.__setattr__(self, "response_rate", _int_keys(self.response_rate))
        object.__setattr__(self, "response_effect", _int_keys(self.response_effect))
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if len(self.beta_true) != 4:
            raise ValueError("beta_true must have length 4")
        if set(self.response_rate) != {1, -1} or set(self.response_effect) != {1, -1}:
            raise ValueError("response_rate and response_effect need entries for a1 = 1 and a1 = -1")
        if not all(0 < k < 1 for k in self.response_rate.values()):
            raise ValueError("response rates must lie in (0, 1)")
        if not 0 <= self.icc < 1:
            raise ValueError("icc must lie in [0, 1)")
        if self.response_model not in ("constant", "logistic"):
            raise ValueError(f"unknown response model {self.response_model!r}")
        if self.sigma2_marg <= 0:
            raise FeasibilityError("covariate effects exhaust sd_y^2: sigma2_marg <= 0")
        self._check_feasible()

    @property
    def p(self) -> int:
        return len(self.eta_true)

    @property
    def sigma2_marg(self) -> float:
        return self.sd_y**2 - float(np.sum(np.square(self.eta_true)))

    def kappa(self, a1, x=None):
        """Pr(R = 1 | A1 = a1, X), vectorized over ``a1``."""
        a1 = np.asarray(a1)
        base = np.where(a1 == 1, self.response_rate[1], self.response_rate[-1])
        if self.response_model == "constant" or self.response_slope == 0:
            return base
        x1 = np.asarray(x, dtype=float)[..., 0]
        icpt = np.where(a1 == 1, self._intercept(1), self._intercept(-1))
        return expit(icpt + self.response_slope * x1)

    def _intercept(self, a1):
        # intercept so that E_X kappa(a1, X) equals the marginal rate
        target = self.response_rate[a1]
        nodes, wts = np.polynomial.hermite_e.hermegauss(80)
        wts = wts / wts.sum()
        lo, hi = -50.0, 50.0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if wts @ expit(mid + self.response_slope * nodes) < target:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)

    def _check_feasible(self):
        s2, rho = self.sigma2_marg, self.icc
        for a1 in (1, -1):
            d = self.beta_true[2] + self.beta_true[3] * a1
            if self.response_model == "logistic" and self.response_slope != 0:
                x = np.linspace(-_X_RANGE, _X_RANGE, 2001)[:, None]
                kap = self.kappa(np.full(len(x), a1), x)
            else:
                kap = np.array([self.response_rate[a1]])
            omega_r = abs(self.response_effect[a1]) + abs(d) / (1 - kap)
            between = kap * (1 - kap) * omega_r**2
            if np.any(between >= s2):
                raise FeasibilityError(
                    f"a1={a1}: kappa(1-kappa)omega^2 = {between.max():.6g} >= sigma2_marg = {s2:.6g}"
                )
            if np.any(between > rho * s2):
                raise FeasibilityError(
                    f"a1={a1}: kappa(1-kappa)omega^2 = {between.max():.6g} exceeds "
                    f"icc*sigma2_marg = {rho * s2:.6g}"
                )

    def to_dict(self) -> dict:
        out = asdict(self)
        out["cluster_sizes"] = list(self.cluster_sizes) if isinstance(self.cluster_sizes, tuple) else self.cluster_sizes
        out["beta_true"] = list(self.beta_true)
        out["eta_true"] = list(self.eta_true)
        out["response_rate"] = {str(k): v for k, v in self.response_rate.items()}
        out["response_effect"] = {str(k): v for k, v in self.response_effect.items()}
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "GenerativeSpec":
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "GenerativeSpec":
        return cls.from_dict(json.loads(text))


def _branch_arrays(spec: GenerativeSpec, a1, r, a2, x):
    """Vectorized ``(xi, tau2, cov)`` for clusters with pathway (a1, r, a2)."""
    a1, r, a2 = np.asarray(a1), np.asarray(r), np.asarray(a2)
    b0, b1, b2, b3 = spec.beta_true
    x = np.asarray(x, dtype=float).reshape(len(a1), spec.p)
    mu_bar = b0 + b1 * a1 + x @ np.asarray(spec.eta_true)
    d = b2 + b3 * a1
    kap = spec.kappa(a1, x)
    omega0 = np.where(a1 == 1, spec.response_effect[1], spec.response_effect[-1])
    omega_r = np.abs(omega0) + np.abs(d) / (1 - kap)
    s2, rho = spec.sigma2_marg, spec.icc
    g = omega0 - a2 * d / (1 - kap)
    resp = r == 1
    xi = np.where(resp, mu_bar + (1 - kap) * omega0, mu_bar + a2 * d - kap * g)
    base = kap * (1 - kap) * omega_r**2
    nr_shift = kap**2 * omega_r**2 - kap * g**2
    tau2 = np.where(resp, s2 - base, s2 + nr_shift)
    cov = np.where(resp, rho * s2 - base, rho * s2 + nr_shift)
    return xi, tau2, cov


def conditional_moments(spec: GenerativeSpec, ai: EmbeddedAI, x, r: int):
    """``(xi, tau2, rho_c)`` of ``Y(ai)`` given X and response status."""
    a1, a2 = ai
    xi, tau2, cov = _branch_arrays(spec, [a1], [r], [a2], np.atleast_1d(np.asarray(x, dtype=float))[None, :])
    return float(xi[0]), float(tau2[0]), float(cov[0] / tau2[0])


def replication_rng(base_seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(base_seed), spawn_key=tuple(int(k) for k in key)))


def generate_trial(spec: GenerativeSpec, rng: np.random.Generator | None = None,
                   ids=None) -> TrialDataset:
    """Draw one trial: X, A1, R, A2 and CS-correlated member outcomes."""
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    n = spec.n
    if isinstance(spec.cluster_sizes, tuple):
        lo, hi = spec.cluster_sizes
        m = rng.integers(lo, hi + 1, size=n)
    else:
        m = np.full(n, spec.cluster_sizes)
    x = rng.standard_normal((n, spec.p))
    a1 = np.where(rng.random(n) < 0.5, 1, -1)
    r = (rng.random(n) < spec.kappa(a1, x)).astype(int)
    a2 = np.where(rng.random(n) < 0.5, 1, -1)
    a2 = np.where(r == 1, 0, a2)
    xi, tau2, cov = _branch_arrays(spec, a1, r, a2, x)
    z0 = rng.standard_normal(n)
    z = rng.standard_normal(int(m.sum()))
    cl = np.repeat(np.arange(n), m)
    y = xi[cl] + np.sqrt(cov)[cl] * z0[cl] + np.sqrt(tau2 - cov)[cl] * z
    bounds = np.cumsum(m)[:-1]
    ids = range(n) if ids is None else ids
    clusters = tuple(
        ClusterRecord(cid, x[i], int(a1[i]), int(r[i]), None if r[i] else int(a2[i]), yi)
        for i, (cid, yi) in enumerate(zip(ids, np.split(y, bounds)))
    )
    names = tuple(f"x{j + 1}" for j in range(spec.p))
    return TrialDataset(clusters, names)


@dataclass(frozen=True)
class DesignPoint:
    n: int
    m: int | tuple[int, int]
    delta: float
    icc: float
    kappa: tuple[float, float]
    cor: float

    def label(self) -> dict:
        m = f"{self.m[0]}-{self.m[1]}" if isinstance(self.m, tuple) else str(self.m)
        kap = f"{self.kappa[0]:g}" if self.kappa[0] == self.kappa[1] else f"{self.kappa[0]:g}/{self.kappa[1]:g}"
        return {"n": str(self.n), "m": m, "delta": f"{self.delta:g}", "icc": f"{self.icc:g}",
                "kappa": kap, "cor": f"{self.cor:g}"}


def _kappa_pair(k):
    if isinstance(k, (list, tuple)):
        return (float(k[0]), float(k[1]))
    return (float(k), float(k))


def _size(m):
    return tuple(int(v) for v in m) if isinstance(m, (list, tuple)) else int(m)


@dataclass(frozen=True)
class SimulationDesign:
    """Full-factorial grid of design points plus run settings."""

    n: tuple = (10,)
    m: tuple = (5,)
    delta: tuple = (0.5,)
    icc: tuple = (0.1,)
    kappa: tuple = (0.5,)
    cor: tuple = (0.5,)
    replications: int = 2000
    base_seed: int = 0
    beta: tuple = DEFAULT_BETA
    response_effect: float = 0.0
    contrast: tuple = ((1, 1), (-1, -1))
    presets: tuple = ("minimal", "on-the-shelf", "proposed", "full")
    weights: str = "known"
    structure: str = "exchangeable"
    variance_mode: str = "per_regimen"
    icc_mode: str = "per_regimen"

    def __post_init__(self):
        for name in ("n", "m", "delta", "icc", "kappa", "cor", "presets"):
            val = getattr(self, name)
            if not isinstance(val, (list, tuple)) or isinstance(val, str):
                val = (val,)
            object.__setattr__(self, name, tuple(val))
        object.__setattr__(self, "m", tuple(_size(m) for m in self.m))
        object.__setattr__(self, "kappa", tuple(_kappa_pair(k) for k in self.kappa))
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
        object.__setattr__(self, "contrast", tuple(tuple(int(a) for a in ai) for ai in self.contrast))
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        if any(d <= 0 for d in self.delta):
            raise ValueError("delta must be positive")

    def points(self) -> list[DesignPoint]:
        return [DesignPoint(*vals) for vals in itertools.product(
            self.n, self.m, self.delta, self.icc, self.kappa, self.cor)]

    def to_dict(self) -> dict:
        out = asdict(self)
        for k, v in out.items():
            if isinstance(v, tuple):
                out[k] = json.loads(json.dumps(v))
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "SimulationDesign":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown design fields: {sorted(extra)}")
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SimulationDesign":
        return cls.from_dict(json.loads(text))


def spec_from_design(point: DesignPoint, design: SimulationDesign | None = None, seed: int = 0) -> GenerativeSpec:
    """Generative spec for one grid point: ``sd_y = 3.5 / delta``."""
    design = design or SimulationDesign()
    if point.delta <= 0:
        raise ValueError("delta must be positive")
    if point.cor**2 >= 1:
        raise ValueError("cor(X, Y)^2 must be < 1")
    sd_y = EFFECT / point.delta
    return GenerativeSpec(
        n=point.n,
        cluster_sizes=point.m,
        beta_true=design.beta,
        eta_true=(point.cor * sd_y,),
        sd_y=sd_y,
        icc=point.icc,
        response_rate={1: point.kappa[0], -1: point.kappa[1]},
        response_effect={1: design.response_effect, -1: design.response_effect},
        seed=seed,
    )
