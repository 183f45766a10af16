import numpy as np
import pytest

from csmart.data import ClusterRecord, TrialDataset
from csmart.oracles import random_dataset


def make_dataset(rows, p=0):
    """Build a dataset from ``(a1, r, a2, y[, x])`` tuples."""
    clusters = []
    for i, row in enumerate(rows):
        a1, r, a2, y = row[:4]
        x = row[4] if len(row) > 4 else np.zeros(p)
        clusters.append(ClusterRecord(f"c{i}", x, a1, r, a2, y))
    return TrialDataset(tuple(clusters))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_ds(rng):
    return random_dataset(rng, 8, m=(1, 4), p=1)


@pytest.fixture
def balanced_rows():
    """One cluster per pathway, two members each, no covariates."""
    return [
        (1, 1, None, [10.0, 12.0]),
        (1, 0, 1, [20.0, 21.0]),
        (1, 0, -1, [14.0, 15.0]),
        (-1, 1, None, [8.0, 9.0]),
        (-1, 0, 1, [11.0, 13.0]),
        (-1, 0, -1, [6.0, 7.0]),
    ]


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
