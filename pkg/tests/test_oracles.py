import numpy as np
import pytest
from numpy.testing import assert_allclose

from csmart import oracles
from csmart import sandwich as sw
from csmart.gee import FitConfig, fit, fit_weighted_cs
from csmart.oracles import (
    OracleReport,
    constrained_pml,
    dense_sandwich,
    mixture_moment_mc,
    random_dataset,
    sigma2_profile_check,
)
from csmart.simgen import regimen_moments_from_pathways


def test_dense_oracle_independent_of_engine_on_five_plus_clusters(rng):
    ds = random_dataset(rng, 6, m=(2, 3), p=0)
    f = fit(ds)
    assert_allclose(dense_sandwich(ds, f), sw.sandwich_plain(f).sigma_hat, rtol=1e-10)
    assert_allclose(dense_sandwich(ds, f, bias_correct=True), sw.fsa4_bias_corrected(f).sigma_hat, rtol=1e-10)


def single_regimen(rng, nc=6, m=4, shared=1.0):
    X = np.column_stack([np.ones(nc), rng.standard_normal(nc)])
    Y = (X @ [5.0, 1.0])[:, None] + shared * rng.standard_normal((nc, 1)) + rng.standard_normal((nc, m))
    w = rng.choice([2.0, 4.0], size=nc)
    return X, Y, w


def test_pml_matches_gee(rng):
    X, Y, w = single_regimen(rng)
    g = fit_weighted_cs(X, Y, w)
    theta, s2, rho = constrained_pml(X, Y, w)
    assert_allclose(np.r_[g.theta, g.sigma2[0], g.rho[0]], np.r_[theta, s2, rho], atol=1e-5, rtol=1e-5)


def test_pml_boundary_at_zero_icc(rng):
    X, Y, w = single_regimen(rng, shared=0.0)
    Y = Y + 2.0 * np.array([1.0, -1.0, 1.0, -1.0])
    g = fit_weighted_cs(X, Y, w)
    theta, s2, rho = constrained_pml(X, Y, w)
    assert g.rho[0] == 0.0 and rho == pytest.approx(0.0, abs=1e-8)
    assert_allclose(np.r_[g.theta, g.sigma2[0]], np.r_[theta, s2], atol=1e-5, rtol=1e-5)


def test_sigma2_profile(rng):
    X, Y, w = single_regimen(rng)
    closed, numeric = sigma2_profile_check(X, Y, w, np.array([5.0, 1.0]), 0.3)
    assert_allclose(closed, numeric, rtol=1e-7)


def test_mixture_mc_limits():
    est, se = mixture_moment_mc(1.0, 3.0, -1.0, 2.0, 9.0, 0.3, 0.7, draws=50_000, seed=1)
    assert np.all(np.abs(est - [3.0, 2.0, 0.3]) <= 4 * se + 1e-12)
    est, se = mixture_moment_mc(0.4, 1.0, 1.0, 2.0, 2.0, 0.25, 0.25, draws=50_000, seed=2)
    assert np.all(np.abs(est - regimen_moments_from_pathways(0.4, 1.0, 1.0, 2.0, 2.0, 0.25, 0.25)) <= 4 * se)


def test_report_formatting():
    r = OracleReport.compare("x", [1.0, 2.0], [1.0, 2.0 + 1e-12], 1e-10)
    assert r.passed and str(r).startswith("PASS")
    r = OracleReport.compare("x", [1.0], [1.1], 1e-10)
    assert not r.passed and str(r).startswith("FAIL")


def test_suite_passes_and_lists_properties():
    reports = oracles.run_all(seed=1, instances=3)
    assert all(r.passed for r in reports), [str(r) for r in reports if not r.passed]
    labels = " ".join(r.label for r in reports)
    for key in ("dense sandwich", "constrained PML", "sigma2 profile", "mixture moments",
                "beta rho-free", "sandwich rho-free", "leverage factor"):
        assert key in labels
    assert all(r.tolerance > 0 for r in reports)


def test_perturbed_engine_is_caught(monkeypatch):
    real = sw.cluster_scores
    monkeypatch.setattr(sw, "cluster_scores", lambda f: 1.001 * real(f))
    reports = oracles.run_all(seed=2, instances=2)
    bad = [r for r in reports if not r.passed]
    assert bad and all("dense sandwich" in r.label or "rho-free" in r.label or "leverage" in r.label
                       for r in bad)
    assert any("dense sandwich" in r.label for r in bad)
