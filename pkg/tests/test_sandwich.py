import warnings

import numpy as np
import pytest
from numpy.testing import assert_allclose

from csmart import sandwich as sw
from csmart.data import TrialDataset
from csmart.gee import FitConfig, fit
from csmart.oracles import _MU_T_INV_T, _leverage_factors, dense_sandwich, random_dataset
from csmart.simgen import DesignPoint, generate_trial, replication_rng, spec_from_design

from conftest import make_dataset


def duplicated(ds, times):
    clusters = [c for _ in range(times) for c in ds.clusters]
    return TrialDataset(tuple(clusters), ds.covariate_names)


def test_scores_sum_to_zero(small_ds):
    f = fit(small_ds, FitConfig(tol=1e-12))
    assert_allclose(sw.cluster_scores(f).sum(axis=0), 0.0, atol=1e-8)


def test_responders_contribute_two_regimens(small_ds):
    f = fit(small_ds)
    counts = np.bincount(f.pairs.cluster, minlength=small_ds.n)
    assert np.all(counts[small_ds.r == 1] == 2)
    assert np.all(counts[small_ds.r == 0] == 1)


def test_degenerate_scores_flagged(balanced_rows):
    rows = [(a1, r, a2, [3.0] * len(y)) for a1, r, a2, y in balanced_rows]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        f = fit(make_dataset(rows))
    res = sw.sandwich_plain(f)
    assert res.metadata.get("degenerate")
    assert_allclose(res.sigma_hat, 0.0, atol=1e-20)


def test_duplication_halves_variance(small_ds):
    f1 = fit(small_ds, FitConfig(tol=1e-12))
    f2 = fit(duplicated(small_ds, 2), FitConfig(tol=1e-12))
    assert_allclose(f2.theta, f1.theta, rtol=1e-10)
    assert_allclose(sw.sandwich_plain(f2).sigma_hat, sw.sandwich_plain(f1).sigma_hat / 2, rtol=1e-8)


@pytest.mark.parametrize("weights", ["known", "estimated"])
@pytest.mark.parametrize("dof,bias", [(False, False), (True, False), (False, True), (True, True)])
def test_matches_dense_oracle(rng, weights, dof, bias):
    ds = random_dataset(rng, 6, m=(1, 4), p=1)
    f = fit(ds, FitConfig(weights=weights))
    got = sw.sandwich(f, sw.FsaConfig(dof_scale=dof, bias_correct=bias)).sigma_hat
    want = dense_sandwich(ds, f, dof_scale=dof, bias_correct=bias)
    assert_allclose(got, want, rtol=1e-10, atol=1e-10 * np.abs(want).max())


def test_estimated_weight_correction_shrinks_diagonal(rng):
    for _ in range(20):
        ds = random_dataset(rng, 14, m=(2, 5), p=1)
        f = fit(ds, FitConfig(weights="estimated"))
        plain = sw.sandwich(f, correct_weights=False)
        corrected = sw.sandwich_estimated_weights(f)
        assert np.all(np.diag(corrected.meat) <= np.diag(plain.meat) + 1e-12)
        assert np.all(np.diag(corrected.sigma_hat) <= np.diag(plain.sigma_hat) + 1e-12)


def test_zero_correction_equals_plain(small_ds, monkeypatch):
    f = fit(small_ds, FitConfig(weights="estimated"))
    C, F = sw.weight_correction(f)
    monkeypatch.setattr(sw, "weight_correction", lambda fit: (np.zeros_like(C), F))
    assert_allclose(sw.sandwich_estimated_weights(f).sigma_hat,
                    sw.sandwich(f, correct_weights=False).sigma_hat, rtol=1e-14)


def test_known_weights_have_no_correction(small_ds):
    with pytest.raises(ValueError):
        sw.weight_correction(fit(small_ds))


def test_fsa3_factor(small_ds):
    f = fit(small_ds)
    base = sw.sandwich_plain(f)
    scaled = sw.fsa3_scale(base, 10, 0, 4)
    assert_allclose(scaled.sigma_hat, base.sigma_hat * 5 / 3, rtol=1e-15)
    big = sw.fsa3_scale(base, 10**9, 0, 4)
    assert_allclose(big.sigma_hat, base.sigma_hat, rtol=1e-8)
    with pytest.raises(ValueError):
        sw.fsa3_scale(base, 5, 2, 4)


def test_fsa4_approaches_plain_for_large_n(rng):
    f = fit(duplicated(random_dataset(rng, 40, m=(2, 5), p=1), 64))
    adj, plain = sw.fsa4_bias_corrected(f).sigma_hat, sw.sandwich_plain(f).sigma_hat
    assert np.linalg.norm(adj - plain) <= 0.01 * np.linalg.norm(plain)
    assert_allclose(np.diag(adj), np.diag(plain), rtol=0.01)


def test_fsa4_inflates_diagonal_at_small_n():
    point = DesignPoint(10, 5, 0.5, 0.1, (0.5, 0.5), 0.5)
    spec = spec_from_design(point)
    larger = total = 0
    for rep in range(1000):
        ds = generate_trial(spec, replication_rng(99, rep))
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                f = fit(ds, check_design=False, warn=False)
                adj = np.diag(sw.fsa4_bias_corrected(f).sigma_hat)
        except np.linalg.LinAlgError:
            continue
        total += 1
        larger += bool(np.all(adj >= np.diag(sw.sandwich_plain(f).sigma_hat)))
    assert total > 500
    assert larger / total >= 0.95


def test_leverage_factor_in_regimen_mean_parameterization(rng):
    ds = random_dataset(rng, 11, m=3, p=0, equal_m=True)
    f = fit(ds)
    U = sw.cluster_scores(f)
    Ut = sw.bias_corrected_scores(f, U)
    assert_allclose(Ut @ _MU_T_INV_T.T, _leverage_factors(f) * (U @ _MU_T_INV_T.T), rtol=1e-9, atol=1e-12)


def test_singular_leverage_reported(balanced_rows):
    # without the a1=1 responder, (1,1) and (1,-1) each rest on a single cluster
    rows = [(a1, r, a2, np.asarray(y) + [0.0, 0.5]) for a1, r, a2, y in balanced_rows[1:]]
    f = fit(make_dataset(rows), check_design=False)
    with pytest.raises(sw.SingularLeverageError) as err:
        sw.fsa4_bias_corrected(f)
    assert err.value.cluster in ("c0", "c1")


def test_variant_names_round_trip():
    for name, cfg in sw.PRESETS.items():
        assert sw.variant_name(cfg) == name
        assert sw.resolve_fsa(name) == cfg
    custom = sw.FsaConfig(dof_scale=True)
    assert sw.variant_name(custom) == "fsa13"
    assert sw.resolve_fsa("fsa13") == custom
    with pytest.raises(ValueError):
        sw.resolve_fsa("fsa5")


def test_result_is_symmetric_with_nonnegative_diagonal(small_ds):
    for name in sw.PRESETS:
        s = sw.sandwich(fit(small_ds), name).sigma_hat
        assert_allclose(s, s.T)
        assert np.all(np.diag(s) >= 0)
