"""Replicated simulation experiments over a design grid.

Every replication draws from its own stream keyed by ``(base_seed,
point index, replication)``. Per-replication results are stored in arrays
and reduced in replication order, so tables do not depend on how work was
split across processes.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import EmbeddedAI
from .gee import ConvergenceError, FitConfig, RankDeficiencyError, fit
from .inference import interval, pairwise_contrast
from .sandwich import PRESETS, SingularLeverageError, resolve_fsa, bias_corrected_scores, cluster_scores, sandwich
from .simgen import DesignPoint, SimulationDesign, generate_trial, replication_rng, spec_from_design
from .weights import DegenerateWeightsError

__all__ = [
    "FAILURE_FLAG_RATE",
    "MIN_RELIABLE_REPS",
    "ReplicationBatch",
    "VariantSummary",
    "PointSummary",
    "ExperimentResult",
    "run_point",
    "run_experiment",
    "summarize",
    "nozero_and_bootse",
    "emit_table",
]

FAILURE_FLAG_RATE = 0.05
MIN_RELIABLE_REPS = 30
DESIGN_COLUMNS = ("n", "m", "delta", "icc", "kappa", "cor")

_NUMERIC_FAILURES = (
    RankDeficiencyError,
    ConvergenceError,
    SingularLeverageError,
    DegenerateWeightsError,
    np.linalg.LinAlgError,
    FloatingPointError,
    ValueError,
)


@dataclass
class ReplicationBatch:
    """Raw per-replication output for one design point.

    ``estimate`` is NaN where the fit failed; ``variance``, ``low`` and
    ``high`` are NaN where the variant failed.
    """

    estimate: np.ndarray
    variance: dict[str, np.ndarray]
    low: dict[str, np.ndarray]
    high: dict[str, np.ndarray]

    @classmethod
    def empty(cls, reps: int, variants) -> "ReplicationBatch":
        nan = lambda: np.full(reps, np.nan)  # noqa: E731
        return cls(nan(), {v: nan() for v in variants}, {v: nan() for v in variants},
                   {v: nan() for v in variants})

    @classmethod
    def concat(cls, parts) -> "ReplicationBatch":
        parts = list(parts)
        keys = parts[0].variance.keys()
        cat = lambda attr: {v: np.concatenate([getattr(p, attr)[v] for p in parts]) for v in keys}  # noqa: E731
        return cls(np.concatenate([p.estimate for p in parts]), cat("variance"), cat("low"), cat("high"))


def _fit_config(design: SimulationDesign) -> FitConfig:
    return FitConfig(design.structure, design.variance_mode, design.icc_mode, design.weights)


def _contrast(design: SimulationDesign, p: int):
    a, b = (EmbeddedAI(*ai) for ai in design.contrast)
    return pairwise_contrast(a, b, p)


def run_point(design: SimulationDesign, point_index: int, start: int = 0, stop: int | None = None,
              level: float = 0.95) -> ReplicationBatch:
    """Replications ``start..stop`` of one design point."""
    point = design.points()[point_index]
    stop = design.replications if stop is None else stop
    spec = spec_from_design(point, design, seed=design.base_seed)
    config = _fit_config(design)
    coef = _contrast(design, spec.p).coefficients
    out = ReplicationBatch.empty(stop - start, design.presets)
    for k, rep in enumerate(range(start, stop)):
        ds = generate_trial(spec, replication_rng(design.base_seed, point_index, rep))
        with warnings.catch_warnings(), np.errstate(all="ignore"):
            warnings.simplefilter("ignore")
            try:
                f = fit(ds, config, check_design=False, warn=False)
            except _NUMERIC_FAILURES:
                continue
            est = float(coef @ f.theta)
            out.estimate[k] = est
            U = cluster_scores(f)
            Ut = None
            for name in design.presets:
                fsa = resolve_fsa(name)
                try:
                    if fsa.bias_correct and Ut is None:
                        Ut = bias_corrected_scores(f, U)
                    s = sandwich(f, fsa, scores=U, corrected_scores=Ut)
                    var = float(coef @ s.sigma_hat @ coef)
                    if not np.isfinite(var):
                        continue
                    low, high, _ = interval(est, max(var, 0.0), f.n, f.p, f.q, fsa.reference, level)
                except _NUMERIC_FAILURES:
                    continue
                out.variance[name][k] = var
                out.low[name][k] = low
                out.high[name][k] = high
    return out


def _run_chunk(args):
    design_json, point_index, start, stop, level = args
    return run_point(SimulationDesign.from_json(design_json), point_index, start, stop, level)


@dataclass(frozen=True)
class VariantSummary:
    avg_se: float
    coverage: float
    mc_se: float
    coverage_all: float
    nozero: float
    used: int
    failures: int
    unreliable: bool


@dataclass(frozen=True)
class PointSummary:
    point: DesignPoint
    truth: float
    replications: int
    fits: int
    avg_estimate: float
    bias: float
    sd_estimate: float
    rmse: float
    variants: dict[str, VariantSummary]
    flagged: bool


@dataclass
class ExperimentResult:
    design: SimulationDesign
    points: list[PointSummary]
    batches: list[ReplicationBatch] = field(default_factory=list, repr=False)

    @property
    def flagged(self) -> bool:
        return any(p.flagged for p in self.points)

    def variant_names(self) -> tuple[str, ...]:
        return tuple(self.design.presets)


def _mc_se(c: float, b: int) -> tuple[float, bool]:
    if b < MIN_RELIABLE_REPS:
        return math.sqrt(0.25 / max(b, 1)), True
    return math.sqrt(c * (1.0 - c) / b), False


def nozero_and_bootse(low, high, variance) -> tuple[float, float]:
    """Share of intervals excluding 0 and ``sqrt`` of the mean variance."""
    low, high, variance = (np.asarray(a, dtype=float) for a in (low, high, variance))
    ok = np.isfinite(variance)
    if not ok.any():
        raise ValueError("no successful replications")
    nozero = float(np.mean((low[ok] > 0) | (high[ok] < 0)))
    return nozero, float(np.sqrt(np.mean(variance[ok])))


def summarize(point: DesignPoint, truth: float, batch: ReplicationBatch) -> PointSummary:
    B = len(batch.estimate)
    ok = np.isfinite(batch.estimate)
    fits = int(ok.sum())
    if fits:
        est = batch.estimate[ok]
        avg = float(np.mean(est))
        bias = avg - truth
        sd = float(np.std(est))
        rmse = float(np.sqrt(np.mean((est - truth) ** 2)))
    else:
        avg = bias = sd = rmse = float("nan")
    variants = {}
    worst = B - fits
    for name, var in batch.variance.items():
        good = np.isfinite(var)
        used = int(good.sum())
        failures = B - used
        worst = max(worst, failures)
        if used:
            hit = (batch.low[name][good] <= truth) & (truth <= batch.high[name][good])
            cov = float(np.mean(hit))
            cov_all = float(hit.sum() / B)
            avg_se = float(np.sqrt(np.mean(var[good])))
            nozero, _ = nozero_and_bootse(batch.low[name], batch.high[name], var)
        else:
            cov = avg_se = nozero = float("nan")
            cov_all = 0.0
        mcse, unreliable = _mc_se(cov if used else 0.5, used)
        variants[name] = VariantSummary(avg_se, cov, mcse, cov_all, nozero, used, failures, unreliable)
    return PointSummary(point, truth, B, fits, avg, bias, sd, rmse, variants,
                        flagged=worst > FAILURE_FLAG_RATE * B)


def _chunks(reps: int, workers: int) -> list[tuple[int, int]]:
    size = max(1, math.ceil(reps / (4 * workers)))
    return [(s, min(s + size, reps)) for s in range(0, reps, size)]


def run_experiment(design: SimulationDesign, workers: int = 1, level: float = 0.95,
                   keep_batches: bool = False) -> ExperimentResult:
    """Run every design point; results are identical for any ``workers``."""
    for name in design.presets:
        resolve_fsa(name)
    points = design.points()
    batches = []
    if workers <= 1:
        batches = [run_point(design, i, level=level) for i in range(len(points))]
    else:
        text = design.to_json()
        tasks, owners = [], []
        for i in range(len(points)):
            for start, stop in _chunks(design.replications, workers):
                tasks.append((text, i, start, stop, level))
                owners.append(i)
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_run_chunk, tasks))
        for i in range(len(points)):
            batches.append(ReplicationBatch.concat(p for p, o in zip(parts, owners) if o == i))
    summaries = []
    for i, point in enumerate(points):
        spec = spec_from_design(point, design)
        truth = float(_contrast(design, spec.p).coefficients[:4] @ np.asarray(design.beta))
        summaries.append(summarize(point, truth, batches[i]))
    return ExperimentResult(design, summaries, batches if keep_batches else [])


def _header(variants) -> list[str]:
    cols = list(DESIGN_COLUMNS) + ["replications", "fits", "avg", "bias", "sd", "rmse"]
    for v in variants:
        cols += [f"{v}_se", f"{v}_coverage", f"{v}_mcse", f"{v}_coverage_all"]
    return cols + ["unreliable", "flagged"]


def _num(x: float) -> str:
    return "nan" if not np.isfinite(x) else f"{x:.6f}"


def _rows(result: ExperimentResult | None, variants):
    if result is None:
        return
    for p in result.points:
        lab = p.point.label()
        row = [lab[c] for c in DESIGN_COLUMNS]
        row += [str(p.replications), str(p.fits)] + [_num(v) for v in (p.avg_estimate, p.bias, p.sd_estimate, p.rmse)]
        for v in variants:
            s = p.variants[v]
            row += [_num(s.avg_se), _num(s.coverage), _num(s.mc_se), _num(s.coverage_all)]
        row += [str(int(any(s.unreliable for s in p.variants.values()))), str(int(p.flagged))]
        yield row


def emit_table(result: ExperimentResult | None, path=None, format: str = "csv", variants=None) -> str:
    """Write (and return) the Table-2-style summary as CSV or aligned text."""
    if variants is None:
        variants = result.variant_names() if result is not None else tuple(PRESETS)
    header = _header(variants)
    rows = list(_rows(result, variants))
    if format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
        text = buf.getvalue()
    elif format == "text":
        widths = [max(len(h), *(len(r[j]) for r in rows)) if rows else len(h) for j, h in enumerate(header)]
        lines = ["  ".join(h.rjust(wd) for h, wd in zip(header, widths))]
        lines += ["  ".join(c.rjust(wd) for c, wd in zip(r, widths)) for r in rows]
        text = "\n".join(lines) + "\n"
    else:
        raise ValueError(f"unknown table format {format!r}")
    if path is not None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    return text
