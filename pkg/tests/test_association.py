import dataclasses

import numpy as np
import pytest

from ordgee.association import (
    AssociationEstimate,
    AssociationSpec,
    assemble_working_covariance,
    build_marginalized_tables,
    estimate_correlation_dr,
    estimate_correlation_moments,
    estimate_correlation_weighted,
    fit_rc_loglinear,
    independence_estimate,
    ipfp_joint_probabilities,
    local_odds_ratios,
    pearson_residuals,
    shrink_to_pd,
)
from ordgee.exceptions import InsufficientDataError
from ordgee.panel import occasion_cov_block


# -- spec parsing ---------------------------------------------------------------


@pytest.mark.parametrize("text,family,structure", [
    ("corr:exch", "corr", "exchangeable"),
    ("corr:ind", "corr", "independent"),
    ("lor:uniform", "lor", "uniform"),
    ("lor:RC", "lor", "rc-unstructured"),
    ("lor:time.exch", "lor", "time-exchangeable"),
])
def test_spec_parse(text, family, structure):
    spec = AssociationSpec.parse(text)
    assert (spec.family, spec.structure) == (family, structure)


@pytest.mark.parametrize("text", ["corr", "corr:uniform", "foo:exch"])
def test_spec_parse_rejects(text):
    with pytest.raises(ValueError):
        AssociationSpec.parse(text)


# -- residuals ------------------------------------------------------------------


def test_pearson_residual_examples():
    assert pearson_residuals(0.3, 0.3) == 0.0
    assert pearson_residuals(1.0, 0.5) == pytest.approx(1.0)


def test_pearson_residuals_mean_zero(rng):
    mu = rng.uniform(0.1, 0.9, size=100_000)
    y = (rng.random(mu.size) < mu).astype(float)
    assert abs(pearson_residuals(y, mu).mean()) < 0.01


# -- correlation moments ------------------------------------------------------------


def test_moments_constant_products():
    e = np.ones((20, 3, 1)) * np.sqrt(0.3)
    usable = np.ones((20, 3), dtype=bool)
    for structure in ("exchangeable", "banded", "unstructured"):
        est = estimate_correlation_moments(e, usable, structure, p=0, dof_adjust=False)
        np.testing.assert_allclose(est.alpha, 0.3, atol=1e-14)
        np.testing.assert_allclose(est.rho[0, 1], [[0.3]], atol=1e-14)


def test_moments_independence_empty_alpha():
    est = estimate_correlation_moments(np.zeros((5, 3, 2)), np.ones((5, 3), bool), "independent", p=4)
    assert est.alpha.size == 0
    assert not np.any(est.rho)


def test_moments_no_pairs_raises():
    usable = np.zeros((4, 3), dtype=bool)
    usable[:, 0] = True
    with pytest.raises(InsufficientDataError):
        estimate_correlation_moments(np.ones((4, 3, 1)), usable, "exchangeable", p=0)


def test_moments_dof_adjustment():
    e = np.ones((10, 2, 1))
    usable = np.ones((10, 2), dtype=bool)
    est = estimate_correlation_moments(e, usable, "exchangeable", p=2, dof_adjust=True)
    assert est.alpha[0] == pytest.approx(10 / 8)


def test_one_dependent_zeroes_lag_two(rng):
    e = rng.normal(size=(50, 3, 2))
    est = estimate_correlation_moments(e, np.ones((50, 3), bool), "one-dependent", p=0)
    assert not np.any(est.rho[0, 2])
    np.testing.assert_allclose(est.rho[1, 0], est.rho[0, 1].T)


def test_weighted_equals_moments_without_missingness(rng):
    n, T, m = 40, 3, 2
    e = rng.normal(size=(n, T, m))
    obs = np.ones((n, T), dtype=bool)
    ones = np.ones((n, T))
    both = np.ones((n, T, T))
    for structure in ("exchangeable", "unstructured", "banded"):
        a = estimate_correlation_moments(e, obs, structure, p=4)
        b = estimate_correlation_weighted(e, obs, ones, both, obs, structure, p=4)
        np.testing.assert_allclose(b.rho, a.rho, rtol=0, atol=1e-14)


def test_weighted_single_pair_hand_oracle():
    e = np.array([[[0.8], [0.5]]])
    obs = np.ones((1, 2), dtype=bool)
    pi = np.full((1, 2), 0.5)
    pi_both = np.full((1, 2, 2), 0.5)
    est = estimate_correlation_weighted(e, obs, pi, pi_both, obs, "exchangeable", p=0,
                                        dof_adjust=False)
    # (e1/0.5)(e2/0.5) * (0.5 * 0.5 / 0.5) = e1 e2 / 0.5
    assert est.alpha[0] == pytest.approx(0.8 * 0.5 / 0.5)


def test_dr_endpoints(rng):
    n, T, m = 30, 3, 2
    e = rng.normal(size=(n, T, m))
    obs = rng.random((n, T)) < 0.8
    obs[:, 0] = True
    present = np.ones((n, T), dtype=bool)
    pi = rng.uniform(0.5, 1.0, size=(n, T))
    pi_both = pi[:, :, None] * pi[:, None, :]
    expected = rng.normal(size=(n, T, T, m, m))
    w = estimate_correlation_weighted(e, obs, pi, pi_both, present, "exchangeable", p=4)
    d1 = estimate_correlation_dr(e, obs, pi, pi_both, present, expected, "exchangeable", p=4, omega=1.0)
    np.testing.assert_allclose(d1.rho, w.rho, atol=1e-14)


def test_dr_omega_zero_no_missing_equals_moments(rng):
    n, T, m = 25, 3, 2
    e = rng.normal(size=(n, T, m))
    obs = np.ones((n, T), dtype=bool)
    cross = e[:, :, None, :, None] * e[:, None, :, None, :]
    d0 = estimate_correlation_dr(e, obs, np.ones((n, T)), np.ones((n, T, T)), obs, cross,
                                 "unstructured", p=4, omega=0.0)
    mom = estimate_correlation_moments(e, obs, "unstructured", p=4)
    np.testing.assert_allclose(d0.rho, mom.rho, atol=1e-14)


def test_dr_blend_hand_oracle():
    e = np.array([[[1.0], [2.0]], [[0.5], [0.0]]])
    obs = np.array([[True, True], [True, False]])
    present = np.ones((2, 2), dtype=bool)
    pi = np.array([[1.0, 0.5], [1.0, 0.5]])
    pi_both = pi[:, :, None] * pi[:, None, :]
    expected = np.zeros((2, 2, 2, 1, 1))
    expected[0, 0, 1] = expected[0, 1, 0] = 2.0
    expected[1, 0, 1] = expected[1, 1, 0] = 0.5 * 0.3
    est = estimate_correlation_dr(e, obs, pi, pi_both, present, expected, "exchangeable",
                                  p=0, omega=0.5, dof_adjust=False)
    weighted = (1.0 * 2.0 / 0.5) * (1.0 * 0.5 / 0.5) + 0.0
    predicted = 2.0 + 0.15
    assert est.alpha[0] == pytest.approx((0.5 * weighted + 0.5 * predicted) / 2)


def test_dr_rejects_bad_omega():
    z = np.zeros((2, 2, 1))
    with pytest.raises(ValueError):
        estimate_correlation_dr(z, np.ones((2, 2), bool), np.ones((2, 2)), np.ones((2, 2, 2)),
                                np.ones((2, 2), bool), np.zeros((2, 2, 2, 1, 1)), "exchangeable",
                                p=0, omega=1.5)


def test_exchangeable_estimate_stable(scenario):
    from ordgee.estimators import solve_gee
    from ordgee.simulation import generate_panel

    vals = []
    for seed in range(5):
        panel = generate_panel(dataclasses.replace(scenario, n=600), np.random.default_rng(100 + seed))
        fit = solve_gee(panel, AssociationSpec.parse("corr:exch"))
        vals.append(fit.alpha.alpha.mean())
    assert np.std(vals) < 0.05


# -- marginalized tables ------------------------------------------------------------


def test_tables_single_subject():
    tab = build_marginalized_tables(np.array([[1, 2, 0]]), J=2)
    assert tab.pairs == ((0, 1), (0, 2), (1, 2))
    np.testing.assert_array_equal(tab.counts[0], [[0, 1], [0, 0]])
    assert tab.counts[1].sum() == 0 and tab.counts[2].sum() == 0


def test_tables_corner_mass():
    tab = build_marginalized_tables(np.ones((7, 3), dtype=int), J=3)
    assert np.all(tab.counts[:, 0, 0] == 7)
    assert tab.counts.sum() == 21


def test_tables_count_pairwise_complete(incomplete_panel):
    tab = build_marginalized_tables(incomplete_panel)
    obs = incomplete_panel.observed
    for g, (t, s) in enumerate(tab.pairs):
        assert tab.counts[g].sum() == np.sum(obs[:, t] & obs[:, s])


# -- RC loglinear -----------------------------------------------------------------


def _tables(counts, T=3):
    from ordgee.association import MarginalizedTables
    import itertools

    pairs = tuple(itertools.combinations(range(T), 2))
    return MarginalizedTables(pairs, np.broadcast_to(counts, (len(pairs),) + counts.shape).copy())


@pytest.mark.parametrize("structure", ["uniform", "time-exchangeable", "category-exchangeable",
                                       "rc-unstructured"])
def test_rc_independence_table(structure):
    counts = np.outer([10.0, 20.0, 30.0], [15.0, 25.0, 20.0])
    est = fit_rc_loglinear(_tables(counts), structure)
    assert np.max(np.abs(est.log_theta)) < 1e-6


def test_rc_uniform_recovers_common_log_odds():
    table = ipfp_joint_probabilities([0.3, 0.4, 0.3], [0.2, 0.5, 0.3], np.full((2, 2), 2.5)) * 1000
    est = fit_rc_loglinear(_tables(table), "uniform")
    np.testing.assert_allclose(est.log_theta, np.log(2.5), atol=1e-6)
    np.testing.assert_allclose(est.phi, np.log(2.5), atol=1e-6)


def test_rc_binary_saturated():
    table = np.array([[30.0, 12.0], [9.0, 41.0]])
    est = fit_rc_loglinear(_tables(table, T=2), "uniform")
    assert est.log_theta[0, 0, 0] == pytest.approx(np.log(30 * 41 / (12 * 9)), abs=1e-8)


def test_rc_zero_cell_continuity():
    table = np.array([[30.0, 0.0], [9.0, 41.0]])
    est = fit_rc_loglinear(_tables(table, T=2), "uniform")
    assert est.diagnostics["continuity_tables"] == [0]
    assert est.log_theta[0, 0, 0] == pytest.approx(np.log(30.5 * 41.5 / (0.5 * 9.5)), abs=1e-8)


# -- IPFP -------------------------------------------------------------------------


def test_ipfp_independence():
    np.testing.assert_allclose(ipfp_joint_probabilities([0.5, 0.5], [0.5, 0.5], [[1.0]]), 0.25,
                               atol=1e-15)


def test_ipfp_closed_form():
    p = ipfp_joint_probabilities([0.5, 0.5], [0.5, 0.5], [[4.0]])
    np.testing.assert_allclose(p, [[1 / 3, 1 / 6], [1 / 6, 1 / 3]], atol=1e-12)


@pytest.mark.parametrize("J", [2, 3, 4])
def test_ipfp_random_instances(J, rng):
    row = rng.dirichlet(np.ones(J), size=200)
    col = rng.dirichlet(np.ones(J), size=200)
    theta = np.exp(rng.normal(0, 1, size=(200, J - 1, J - 1)))
    p = ipfp_joint_probabilities(row, col, theta)
    assert np.max(np.abs(p.sum(axis=2) - row)) < 1e-10
    assert np.max(np.abs(p.sum(axis=1) - col)) < 1e-10
    assert np.max(np.abs(local_odds_ratios(p) - theta)) < 1e-8


def test_ipfp_rejects_nonpositive_theta():
    with pytest.raises(ValueError):
        ipfp_joint_probabilities([0.5, 0.5], [0.5, 0.5], [[0.0]])


# -- working covariance ---------------------------------------------------------------


def _mu(rng, n=4, T=3, J=3):
    full = rng.dirichlet(np.ones(J) * 3, size=(n, T))
    return full[..., :-1]


def test_independence_covariance_block_diagonal(rng):
    mu = _mu(rng)
    V = assemble_working_covariance(mu, independence_estimate(AssociationSpec.parse("corr:ind"), 3, 3))
    blocks = occasion_cov_block(mu)
    V5 = V.reshape(4, 3, 2, 3, 2)
    for t in range(3):
        np.testing.assert_allclose(V5[:, t, :, t, :], blocks[:, t])
        for s in range(3):
            if s != t:
                assert not np.any(V5[:, t, :, s, :])


def test_unit_odds_matches_independence(rng):
    mu = _mu(rng)
    spec = AssociationSpec.parse("lor:uniform")
    est = independence_estimate(spec, 3, 3)
    est = AssociationEstimate(spec, np.zeros(1), log_theta=np.zeros((3, 2, 2)), pairs=est.pairs)
    est.log_theta[:] = 1e-300  # forces the IPFP path
    V = assemble_working_covariance(mu, est)
    Vi = assemble_working_covariance(mu, independence_estimate(AssociationSpec.parse("corr:ind"), 3, 3))
    np.testing.assert_allclose(V, Vi, atol=1e-12)


def test_exchangeable_binary_hand_oracle():
    mu = np.array([[[0.3], [0.6]]])
    spec = AssociationSpec.parse("corr:exch")
    rho = np.zeros((2, 2, 1, 1))
    rho[0, 1] = rho[1, 0] = 0.4
    V = assemble_working_covariance(mu, AssociationEstimate(spec, np.array([0.4]), rho=rho))
    assert V[0, 0, 1] == pytest.approx(0.4 * np.sqrt(0.3 * 0.7 * 0.6 * 0.4))
    np.testing.assert_allclose(V[0], V[0].T)


def test_local_odds_covariance_symmetric(rng):
    mu = _mu(rng)
    spec = AssociationSpec.parse("lor:rc")
    est = AssociationEstimate(spec, np.zeros(1), log_theta=rng.normal(size=(3, 2, 2)),
                              pairs=((0, 1), (0, 2), (1, 2)))
    V = assemble_working_covariance(mu, est)
    np.testing.assert_allclose(V, np.swapaxes(V, 1, 2), atol=1e-15)
    assert np.all(np.linalg.eigvalsh(V)[:, 0] > 0)


def _indefinite(a):
    # eigenvalues 1 + a (twice) and 1 - 2a
    return np.array([[1.0, a, -a], [a, 1.0, a], [-a, a, 1.0]])


def test_shrink_to_pd():
    V, eps = shrink_to_pd(_indefinite(0.55)[None] * 2.0)
    assert 0 < eps[0] <= 0.5
    assert np.linalg.eigvalsh(V[0])[0] > 0
    np.testing.assert_allclose(np.diag(V[0]), 2.0)


def test_shrink_limit_exceeded():
    _, eps = shrink_to_pd(_indefinite(0.99)[None])
    assert eps[0] == np.inf


def test_shrink_untouched_when_pd():
    V0 = np.eye(3)[None] * 0.2
    V, eps = shrink_to_pd(V0)
    assert eps[0] == 0
    np.testing.assert_array_equal(V, V0)


def test_shrink_ignores_inactive_rows():
    _, eps = shrink_to_pd(_indefinite(0.99)[None], active=np.array([[True, True, False]]))
    assert eps[0] == 0
