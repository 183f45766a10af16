import numpy as np
import pytest
from numpy.testing import assert_allclose

from csmart.data import REGIMENS, EmbeddedAI
from csmart.oracles import mixture_moment_mc
from csmart.simgen import (
    FeasibilityError,
    DesignPoint,
    GenerativeSpec,
    SimulationDesign,
    branch_moments,
    conditional_moments,
    generate_trial,
    regimen_moments_from_pathways,
    replication_rng,
    spec_from_design,
)


def test_mixture_with_equal_means():
    mu, s2, _ = regimen_moments_from_pathways(0.3, 4.0, 4.0, 2.0, 5.0, 0.1, 0.2)
    assert_allclose([mu, s2], [4.0, 0.3 * 2 + 0.7 * 5])


def test_mixture_symmetric_case_against_monte_carlo():
    args = (0.5, 2.0, 0.0, 1.0, 1.0, 0.2, 0.2)
    exact = np.array(regimen_moments_from_pathways(*args))
    assert_allclose(exact[:2], [1.0, 2.0])
    est, se = mixture_moment_mc(*args, seed=3)
    assert np.all(np.abs(est - exact) <= 4 * se)
    # the mean shift between branches is shared by all members of a cluster
    assert_allclose(exact[2], 0.6)


def test_mixture_degenerate_p():
    assert_allclose(regimen_moments_from_pathways(1.0, 3.0, -1.0, 2.0, 9.0, 0.3, 0.7), (3.0, 2.0, 0.3))


def test_branch_moments_example():
    xr, xnr, tau2, rho_c = branch_moments(0.0, 2.0, 0.5, 49.0, 0.1)
    assert_allclose(tau2, 48.0)
    assert_allclose(rho_c, (4.9 - 1) / 48, rtol=1e-14)
    assert_allclose(rho_c, 0.08125)
    back = regimen_moments_from_pathways(0.5, xr, xnr, tau2, tau2, rho_c, rho_c)
    assert_allclose(back, (0.0, 49.0, 0.1), rtol=1e-12, atol=1e-12)


def test_branch_moments_infeasible():
    with pytest.raises(FeasibilityError, match="icc"):
        branch_moments(0.0, 5.0, 0.5, 49.0, 0.1)
    with pytest.raises(FeasibilityError, match="sigma2_marg"):
        branch_moments(0.0, 20.0, 0.5, 49.0, 0.9)


def test_no_response_effect_gives_marginal_moments():
    spec = GenerativeSpec(n=10, beta_true=(30.0, 1.0, 0.0, 0.0), sd_y=7.0, icc=0.1)
    for ai in REGIMENS:
        for r in (0, 1):
            xi, tau2, rho_c = conditional_moments(spec, ai, (), r)
            assert_allclose([xi, tau2, rho_c], [30 + ai.a1, 49.0, 0.1], rtol=1e-14)


@pytest.mark.parametrize("omega,kappa", [(0.0, 0.5), (1.5, 0.3), (-2.0, 0.6)])
def test_branches_recover_regimen_moments(omega, kappa):
    spec = GenerativeSpec(n=10, sd_y=7.0, icc=0.2, response_rate={1: kappa, -1: kappa},
                          response_effect={1: omega, -1: omega})
    for ai in REGIMENS:
        xr, tr, rr = conditional_moments(spec, ai, (), 1)
        xn, tn, rn = conditional_moments(spec, ai, (), 0)
        mu, s2, rho = regimen_moments_from_pathways(kappa, xr, xn, tr, tn, rr, rn)
        b = spec.beta_true
        assert_allclose(mu, b[0] + b[1] * ai.a1 + b[2] * ai.a2 + b[3] * ai.a1 * ai.a2, rtol=1e-12)
        assert_allclose([s2, rho], [49.0, 0.2], rtol=1e-12)


def test_responder_mean_does_not_depend_on_a2():
    spec = GenerativeSpec(n=10, icc=0.2, response_effect={1: 1.0, -1: 0.5})
    for a1 in (1, -1):
        assert conditional_moments(spec, (a1, 1), (), 1) == conditional_moments(spec, (a1, -1), (), 1)


def test_generate_is_deterministic():
    spec = GenerativeSpec(n=30, cluster_sizes=(2, 6), eta_true=(1.0,), seed=5)
    a, b = generate_trial(spec), generate_trial(spec)
    assert all(x == y for x, y in zip(a.clusters, b.clusters))
    c = generate_trial(spec, replication_rng(5, 0, 1))
    d = generate_trial(spec, replication_rng(5, 0, 1))
    assert all(x == y for x, y in zip(c.clusters, d.clusters))


def test_assignment_frequencies():
    spec = GenerativeSpec(n=100_000, cluster_sizes=1, response_rate={1: 0.3, -1: 0.6})
    ds = generate_trial(spec, np.random.default_rng(11))
    assert abs(np.mean(ds.a1 == 1) - 0.5) < 0.005
    for a1, k in ((1, 0.3), (-1, 0.6)):
        assert abs(np.mean(ds.r[ds.a1 == a1]) - k) < 0.005


def _weighted_stats(values, w):
    mean = np.sum(w * values) / np.sum(w)
    se = np.sqrt(np.sum(w**2 * (values - mean) ** 2)) / np.sum(w)
    return mean, se


def test_regimen_moments_of_generated_data():
    spec = spec_from_design(DesignPoint(100_000, 5, 0.5, 0.2, (0.5, 0.5), 0.5))
    ds = generate_trial(spec, np.random.default_rng(21))
    y = np.array([c.y for c in ds.clusters])
    x = ds.x[:, 0]
    m = 5
    for ai in REGIMENS:
        cons = (ds.a1 == ai.a1) & ((ds.r == 1) | (ds.a2 == ai.a2))
        w = np.where(ds.r[cons] == 1, 2.0, 4.0)
        b = spec.beta_true
        mu = b[0] + b[1] * ai.a1 + b[2] * ai.a2 + b[3] * ai.a1 * ai.a2 + spec.eta_true[0] * x[cons]
        e = y[cons] - mu[:, None]
        mean, se_mean = _weighted_stats(e.mean(axis=1), w)
        var, se_var = _weighted_stats((e**2).mean(axis=1), w)
        cross = (e.sum(axis=1) ** 2 - (e**2).sum(axis=1)) / (m * (m - 1))
        cov, se_cov = _weighted_stats(cross, w)
        assert abs(mean) <= 3 * se_mean
        assert abs(var - spec.sigma2_marg) <= 3 * se_var
        assert abs(cov - spec.icc * spec.sigma2_marg) <= 3 * se_cov


def test_spec_from_design_scaling():
    s = spec_from_design(DesignPoint(10, 5, 0.5, 0.1, (0.5, 0.5), 0.0))
    assert s.sd_y == 7.0 and s.eta_true == (0.0,) and s.sigma2_marg == 49.0
    s = spec_from_design(DesignPoint(10, 5, 0.5, 0.1, (0.5, 0.5), 0.5))
    assert_allclose([s.eta_true[0], s.sigma2_marg], [3.5, 36.75])


def test_infeasible_spec_names_constraint():
    with pytest.raises(FeasibilityError, match="icc"):
        spec_from_design(DesignPoint(10, 5, 0.8, 0.1, (0.5, 0.5), 0.5))
    spec_from_design(DesignPoint(10, 5, 0.8, 0.2, (0.5, 0.5), 0.5))


def test_logistic_response_matches_marginal_rate():
    spec = GenerativeSpec(n=10, beta_true=(30.0, 1.0, 0.0, 0.0), eta_true=(1.0,), icc=0.3,
                          response_model="logistic", response_slope=1.0,
                          response_rate={1: 0.4, -1: 0.5})
    z = np.random.default_rng(0).standard_normal((200_000, 1))
    assert abs(spec.kappa(np.ones(len(z)), z).mean() - 0.4) < 0.005


def test_spec_json_round_trip():
    spec = GenerativeSpec(n=12, cluster_sizes=(2, 4), eta_true=(1.5,), response_rate={1: 0.4, -1: 0.6})
    assert GenerativeSpec.from_json(spec.to_json()) == spec


def test_design_json_round_trip_and_grid():
    d = SimulationDesign(n=(10, 20), delta=(0.2, 0.5), icc=(0.2,), replications=7)
    assert SimulationDesign.from_json(d.to_json()) == d
    assert len(d.points()) == 4
    with pytest.raises(ValueError):
        SimulationDesign.from_dict({"n": [10], "bogus": 1})
