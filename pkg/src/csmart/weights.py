"""Inverse-probability-of-intervention weights.

Known mode uses the design probabilities of a prototypical trial (fair coins at
both stages), giving weight 2 to responders and 4 to non-responders. Estimated
mode replaces them with intercept-only logistic fits, i.e. empirical
proportions, parameterized by ``gamma = (logit p1(+1), logit p2(+1))``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logit

from .data import ClusterRecord, EmbeddedAI, TrialDataset

__all__ = [
    "DegenerateWeightsError",
    "WeightEngine",
    "KNOWN",
    "fit_weights",
    "weight",
    "score_vector",
    "weight_gamma_derivative",
]


class DegenerateWeightsError(ValueError):
    pass


@dataclass(frozen=True)
class WeightEngine:
    mode: str = "known"
    gamma: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.mode not in ("known", "estimated"):
            raise ValueError(f"unknown weight mode {self.mode!r}")
        if self.mode == "known" and tuple(self.gamma) != (0.0, 0.0):
            raise ValueError("known weights use fair-coin probabilities")
        object.__setattr__(self, "gamma", tuple(float(g) for g in self.gamma))

    @property
    def estimated(self) -> bool:
        return self.mode == "estimated"

    @property
    def score_dim(self) -> int:
        return 2

    def p1(self, a1) -> np.ndarray:
        """Pr(A1 = a1); vectorized over ``a1``."""
        p = expit(self.gamma[0])
        return np.where(np.asarray(a1) == 1, p, 1.0 - p)

    def p2(self, a2) -> np.ndarray:
        """Pr(A2 = a2 | R = 0), pooled over first-stage arms."""
        p = expit(self.gamma[1])
        return np.where(np.asarray(a2) == 1, p, 1.0 - p)

    def weights(self, a1, r, a2) -> np.ndarray:
        """Vectorized weights; ``a2`` entries of responders are ignored."""
        a1, r, a2 = np.asarray(a1), np.asarray(r), np.asarray(a2)
        if not self.estimated:
            return np.where(r == 1, 2.0, 4.0)
        return np.where(r == 1, 1.0 / self.p1(a1), 1.0 / (self.p1(a1) * self.p2(a2)))

    def gamma_derivative(self, a1, r, a2) -> np.ndarray:
        """(..., 2) derivative of the weight in ``gamma``."""
        self._require_estimated()
        a1, r, a2 = np.asarray(a1), np.asarray(r), np.asarray(a2)
        w = self.weights(a1, r, a2)
        d1 = -a1 * w * (1.0 - self.p1(a1))
        d2 = np.where(r == 1, 0.0, -a2 * w * (1.0 - self.p2(a2)))
        return np.stack([d1, d2], axis=-1)

    def scores(self, a1, r, a2) -> np.ndarray:
        """(n, 2) per-cluster logistic scores at the current ``gamma``."""
        self._require_estimated()
        a1, r, a2 = np.asarray(a1), np.asarray(r), np.asarray(a2)
        s1 = (a1 == 1) - expit(self.gamma[0])
        s2 = (1 - r) * ((a2 == 1) - expit(self.gamma[1]))
        return np.stack([s1, s2], axis=-1).astype(float)

    def _require_estimated(self):
        if not self.estimated:
            raise ValueError("not applicable to known weights")


KNOWN = WeightEngine("known")


def fit_weights(ds: TrialDataset) -> WeightEngine:
    """Intercept-only logistic fits for A1 and for A2 among non-responders."""
    p1 = float(np.mean(ds.a1 == 1))
    nr = ds.r == 0
    if not 0 < p1 < 1:
        raise DegenerateWeightsError("a first-stage arm is empty")
    if not nr.any():
        raise DegenerateWeightsError("no non-responders: second-stage probability undefined")
    p2 = float(np.mean(ds.a2[nr] == 1))
    if not 0 < p2 < 1:
        raise DegenerateWeightsError("a second-stage option is never assigned")
    return WeightEngine("estimated", (float(logit(p1)), float(logit(p2))))


def _fields(record: ClusterRecord):
    return record.a1, record.r, 0 if record.a2 is None else record.a2


def weight(engine: WeightEngine, record: ClusterRecord, ai: EmbeddedAI) -> float:
    """Weight of ``record`` under regimen ``ai`` (caller applies the indicator)."""
    return float(engine.weights(*_fields(record)))


def score_vector(engine: WeightEngine, record: ClusterRecord) -> np.ndarray:
    return engine.scores(*_fields(record))


def weight_gamma_derivative(engine: WeightEngine, record: ClusterRecord, ai: EmbeddedAI) -> np.ndarray:
    return engine.gamma_derivative(*_fields(record))
