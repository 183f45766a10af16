"""Trial data model for a prototypical two-stage clustered SMART.

A cluster is randomized to a first-stage option ``a1``; responders (``r = 1``)
continue, non-responders (``r = 0``) are re-randomized to ``a2``. Outcomes are
measured on every member of the cluster, covariates at the cluster level.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np

__all__ = [
    "EmbeddedAI",
    "REGIMENS",
    "PATHWAYS",
    "ClusterRecord",
    "TrialDataset",
    "ValidationReport",
    "DataFormatError",
    "consistency_indicator",
    "pathway_of",
    "validate_design",
    "load_csv",
    "write_csv",
]


class DataFormatError(ValueError):
    """Raised for malformed trial data files or invalid records."""


class EmbeddedAI(NamedTuple):
    """An embedded adaptive intervention ``(a1, a2)``; ``a2`` applies to non-responders."""

    a1: int
    a2: int

    def __str__(self) -> str:
        return f"({self.a1},{self.a2})"


REGIMENS: tuple[EmbeddedAI, ...] = (
    EmbeddedAI(1, 1),
    EmbeddedAI(1, -1),
    EmbeddedAI(-1, 1),
    EmbeddedAI(-1, -1),
)

# (a1, r, a2) for pathways 1..6; a2 is None for responders
PATHWAYS: tuple[tuple[int, int, Optional[int]], ...] = (
    (1, 1, None),
    (1, 0, 1),
    (1, 0, -1),
    (-1, 1, None),
    (-1, 0, 1),
    (-1, 0, -1),
)


def _sign(value, name: str) -> int:
    v = int(value)
    if v not in (-1, 1) or v != value:
        raise DataFormatError(f"{name} must be -1 or +1, got {value!r}")
    return v


@dataclass(frozen=True)
class ClusterRecord:
    """Observed data ``(X, A1, R, A2, Y)`` for one cluster."""

    cluster_id: str
    x: np.ndarray
    a1: int
    r: int
    a2: Optional[int]
    y: np.ndarray

    def __post_init__(self):
        x = np.array(self.x, dtype=float).reshape(-1)
        y = np.array(self.y, dtype=float).reshape(-1)
        x.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "cluster_id", str(self.cluster_id))
        object.__setattr__(self, "a1", _sign(self.a1, "a1"))
        if self.r not in (0, 1):
            raise DataFormatError(f"cluster {self.cluster_id}: r must be 0 or 1, got {self.r!r}")
        object.__setattr__(self, "r", int(self.r))
        if self.r == 1:
            if self.a2 is not None:
                raise DataFormatError(f"cluster {self.cluster_id}: responder has a2 set")
        else:
            if self.a2 is None:
                raise DataFormatError(f"cluster {self.cluster_id}: non-responder is missing a2")
            object.__setattr__(self, "a2", _sign(self.a2, "a2"))
        if y.size < 1:
            raise DataFormatError(f"cluster {self.cluster_id}: no member outcomes")
        if not np.all(np.isfinite(y)):
            raise DataFormatError(f"cluster {self.cluster_id}: non-finite outcome")
        if not np.all(np.isfinite(x)):
            raise DataFormatError(f"cluster {self.cluster_id}: non-finite covariate")

    @property
    def m(self) -> int:
        return int(self.y.size)

    def __eq__(self, other):
        if not isinstance(other, ClusterRecord):
            return NotImplemented
        return (
            self.cluster_id == other.cluster_id
            and self.a1 == other.a1
            and self.r == other.r
            and self.a2 == other.a2
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
        )

    __hash__ = None


def consistency_indicator(record: ClusterRecord, ai: EmbeddedAI) -> int:
    """1 if the record's observed sequence is consistent with regimen ``ai``."""
    if record.a1 != ai.a1:
        return 0
    return 1 if record.r == 1 or record.a2 == ai.a2 else 0


def pathway_of(record: ClusterRecord) -> int:
    """Pathway index 1..6 of the observed ``(a1, r, a2)`` sequence."""
    return PATHWAYS.index((record.a1, record.r, record.a2)) + 1


@dataclass(frozen=True)
class TrialDataset:
    """Immutable ordered collection of cluster records.

    Columnar views used by the estimator are computed lazily and cached.
    """

    clusters: tuple[ClusterRecord, ...]
    covariate_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        clusters = tuple(self.clusters)
        object.__setattr__(self, "clusters", clusters)
        if not clusters:
            raise DataFormatError("dataset has no clusters")
        p = clusters[0].x.size
        for c in clusters:
            if c.x.size != p:
                raise DataFormatError(
                    f"cluster {c.cluster_id}: expected {p} covariates, got {c.x.size}"
                )
        names = tuple(self.covariate_names) or tuple(f"x{k + 1}" for k in range(p))
        if len(names) != p:
            raise DataFormatError(f"{len(names)} covariate names for {p} covariates")
        object.__setattr__(self, "covariate_names", names)

    @property
    def n(self) -> int:
        return len(self.clusters)

    @property
    def p(self) -> int:
        return len(self.covariate_names)

    @cached_property
    def sizes(self) -> np.ndarray:
        return np.array([c.m for c in self.clusters], dtype=int)

    @property
    def N(self) -> int:
        return int(self.sizes.sum())

    @cached_property
    def a1(self) -> np.ndarray:
        return np.array([c.a1 for c in self.clusters], dtype=int)

    @cached_property
    def r(self) -> np.ndarray:
        return np.array([c.r for c in self.clusters], dtype=int)

    @cached_property
    def a2(self) -> np.ndarray:
        """Second-stage option, 0 for responders."""
        return np.array([0 if c.a2 is None else c.a2 for c in self.clusters], dtype=int)

    @cached_property
    def x(self) -> np.ndarray:
        return np.array([c.x for c in self.clusters], dtype=float).reshape(self.n, self.p)

    @cached_property
    def ysum(self) -> np.ndarray:
        return np.array([c.y.sum() for c in self.clusters])

    @cached_property
    def ysumsq(self) -> np.ndarray:
        return np.array([np.dot(c.y, c.y) for c in self.clusters])

    @cached_property
    def indicator(self) -> np.ndarray:
        """(n, 4) consistency indicators in ``REGIMENS`` order."""
        a1, r, a2 = self.a1, self.r, self.a2
        cols = [(a1 == ai.a1) & ((r == 1) | (a2 == ai.a2)) for ai in REGIMENS]
        return np.column_stack(cols).astype(int)

    @cached_property
    def pathways(self) -> np.ndarray:
        out = np.empty(self.n, dtype=int)
        out[(self.a1 == 1) & (self.r == 1)] = 1
        out[(self.a1 == 1) & (self.r == 0) & (self.a2 == 1)] = 2
        out[(self.a1 == 1) & (self.r == 0) & (self.a2 == -1)] = 3
        out[(self.a1 == -1) & (self.r == 1)] = 4
        out[(self.a1 == -1) & (self.r == 0) & (self.a2 == 1)] = 5
        out[(self.a1 == -1) & (self.r == 0) & (self.a2 == -1)] = 6
        return out

    def subset(self, index: Sequence[int]) -> "TrialDataset":
        return TrialDataset(tuple(self.clusters[i] for i in index), self.covariate_names)


@dataclass
class ValidationReport:
    ok: bool
    pathway_counts: dict[int, int]
    regimen_counts: dict[EmbeddedAI, int]
    problems: list[str]

    def __str__(self) -> str:
        lines = ["design validation: " + ("PASS" if self.ok else "FAIL")]
        lines.append(
            "  pathway counts: "
            + ", ".join(f"{k}:{v}" for k, v in self.pathway_counts.items())
        )
        lines.append(
            "  regimen counts: "
            + ", ".join(f"{k}:{v}" for k, v in self.regimen_counts.items())
        )
        lines.extend(f"  - {p}" for p in self.problems)
        return "\n".join(lines)


def validate_design(ds) -> ValidationReport:
    """Structural checks run before estimation.

    Accepts a ``TrialDataset`` or any sequence of ``ClusterRecord``-like
    objects, so that records built without validation can still be screened.
    """
    clusters = ds.clusters if isinstance(ds, TrialDataset) else tuple(ds)
    problems: list[str] = []
    pathway_counts = {k: 0 for k in range(1, 7)}
    regimen_counts = {ai: 0 for ai in REGIMENS}
    if not clusters:
        problems.append("no clusters")
    p = None
    for c in clusters:
        cid = getattr(c, "cluster_id", "?")
        y = np.asarray(c.y, dtype=float).reshape(-1)
        x = np.asarray(c.x, dtype=float).reshape(-1)
        if p is None:
            p = x.size
        elif x.size != p:
            problems.append(f"cluster {cid}: covariate length {x.size} != {p}")
        if y.size == 0:
            problems.append(f"cluster {cid}: m_i = 0")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(x))):
            problems.append(f"cluster {cid}: non-finite values")
        if c.r == 1 and c.a2 is not None:
            problems.append(f"cluster {cid}: responder with a2 present")
            continue
        if c.r == 0 and c.a2 is None:
            problems.append(f"cluster {cid}: non-responder with a2 missing")
            continue
        key = (c.a1, c.r, None if c.r == 1 else c.a2)
        if key not in PATHWAYS:
            problems.append(f"cluster {cid}: invalid sequence {key}")
            continue
        pathway_counts[PATHWAYS.index(key) + 1] += 1
        for ai in REGIMENS:
            if c.a1 == ai.a1 and (c.r == 1 or c.a2 == ai.a2):
                regimen_counts[ai] += 1
    for k, count in pathway_counts.items():
        if count == 0 and clusters:
            a1, r, a2 = PATHWAYS[k - 1]
            what = "responders" if r == 1 else f"non-responders with a2={a2}"
            problems.append(f"pathway {k} empty: no {what} under a1={a1}")
    for a1 in (1, -1):
        if pathway_counts[2 if a1 == 1 else 5] + pathway_counts[3 if a1 == 1 else 6] == 0:
            problems.append(
                f"no non-responders under a1={a1}: regimens ({a1},+-1) "
                "indistinguishable in second stage"
            )
    return ValidationReport(not problems, pathway_counts, regimen_counts, problems)


REQUIRED_COLUMNS = ("cluster_id", "member_id", "a1", "r", "a2", "y")


def _parse_sign(text: str, what: str, row: int) -> int:
    try:
        v = int(text)
    except ValueError:
        raise DataFormatError(f"row {row}: {what} must be -1 or 1, got {text!r}") from None
    if v not in (-1, 1):
        raise DataFormatError(f"row {row}: {what} must be -1 or 1, got {text!r}")
    return v


def load_csv(path) -> TrialDataset:
    """Read a member-level CSV (one row per cluster member).

    Columns are ``cluster_id, member_id, a1, r, a2, y`` followed by the
    cluster-level covariates. ``a2`` is the literal ``NA`` for responders.
    Row numbers in error messages count the header as row 1.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        if tuple(header[:6]) != REQUIRED_COLUMNS:
            missing = [c for c in REQUIRED_COLUMNS if c not in header]
            if missing:
                raise DataFormatError(f"row 1: missing column(s) {', '.join(missing)}")
            raise DataFormatError(
                f"row 1: unknown column layout {header[:6]}; expected {list(REQUIRED_COLUMNS)}"
            )
        cov_names = header[6:]
        if len(set(header)) != len(header):
            raise DataFormatError("row 1: duplicated column names")
        for name in cov_names:
            if not name or not name.replace("_", "a").isalnum():
                raise DataFormatError(f"row 1: unknown column {name!r}")
        p = len(cov_names)

        order: list[str] = []
        info: dict[str, tuple] = {}
        ys: dict[str, list[float]] = {}
        for rownum, row in enumerate(reader, start=2):
            if not row or all(not v.strip() for v in row):
                continue
            if len(row) != 6 + p:
                raise DataFormatError(
                    f"row {rownum}: expected {6 + p} fields, got {len(row)}"
                )
            cid = row[0].strip()
            a1 = _parse_sign(row[2].strip(), "a1", rownum)
            r_text = row[3].strip()
            if r_text not in ("0", "1"):
                raise DataFormatError(f"row {rownum}: r must be 0 or 1, got {r_text!r}")
            r = int(r_text)
            a2_text = row[4].strip()
            if r == 1:
                if a2_text != "NA":
                    raise DataFormatError(f"row {rownum}: responder must have a2 = NA")
                a2 = None
            else:
                if a2_text == "NA":
                    raise DataFormatError(f"row {rownum}: non-responder has a2 = NA")
                a2 = _parse_sign(a2_text, "a2", rownum)
            try:
                y = float(row[5])
                x = tuple(float(v) for v in row[6:])
            except ValueError as exc:
                raise DataFormatError(f"row {rownum}: {exc}") from None
            if not math.isfinite(y) or not all(math.isfinite(v) for v in x):
                raise DataFormatError(f"row {rownum}: non-finite value")
            key = (a1, r, a2, x)
            if cid in info:
                if info[cid] != key:
                    raise DataFormatError(
                        f"row {rownum}: cluster {cid} has inconsistent cluster-level fields"
                    )
            else:
                order.append(cid)
                info[cid] = key
                ys[cid] = []
            ys[cid].append(y)
    if not order:
        raise DataFormatError(f"{path}: no data rows")
    records = tuple(
        ClusterRecord(cid, np.array(info[cid][3]), info[cid][0], info[cid][1], info[cid][2], np.array(ys[cid]))
        for cid in order
    )
    return TrialDataset(records, tuple(cov_names))


def write_csv(ds: TrialDataset, path) -> None:
    """Write ``ds`` in the member-level format read by :func:`load_csv`."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REQUIRED_COLUMNS + tuple(ds.covariate_names))
        for c in ds.clusters:
            a2 = "NA" if c.a2 is None else str(c.a2)
            xs = [repr(float(v)) for v in c.x]
            for j, y in enumerate(c.y, start=1):
                w.writerow([c.cluster_id, j, c.a1, c.r, a2, repr(float(y))] + xs)
