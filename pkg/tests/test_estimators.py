import json

import numpy as np
import pytest
from scipy.special import expit

from ordgee.association import AssociationEstimate, AssociationSpec
from ordgee.estimators import (
    EstimatingEquation,
    FitResult,
    _x_weight,
    dr_augmentation,
    fit,
    mi_pool,
    sandwich_dr,
    solve_drgee,
    solve_gee,
    solve_migee,
    solve_wgee,
)
from ordgee.exceptions import NonConvergenceError, PoolingError
from ordgee.missingness import (
    build_weight_matrix,
    filtered_weights,
    fit_missingness_models,
    observation_probs,
)
from ordgee.ordinal import ordinal_probs
from ordgee.panel import OrdinalPanel, mean_model
from ordgee.simulation import Scenario, generate_panel, inject_missingness

from _oracles import augmentation_pair, pooled_ml, toy_problem

STRUCTURES = ["corr:ind", "corr:exch", "corr:1dep", "corr:band", "corr:unst",
              "lor:unif", "lor:time.exch", "lor:cat.exch", "lor:RC"]


# -- fitting basics -----------------------------------------------------------------


def test_independence_gee_matches_ordinal_ml():
    scen = Scenario(n=200)
    for seed in range(3):
        panel = generate_panel(scen, np.random.default_rng(seed))
        res = solve_gee(panel, "corr:ind")
        assert res.converged
        np.testing.assert_allclose(res.beta, pooled_ml(panel), atol=1e-5)


def test_saturated_binary_reproduces_proportions():
    y = np.array([[1], [2], [1], [1], [2]])
    x = np.array([0.0, 0.0, 1.0, 1.0, 1.0])
    panel = OrdinalPanel(y=y, present=np.ones((5, 1), bool), x=x, z=np.zeros((5, 1, 0)), J=2)
    res = solve_gee(panel, "corr:ind")
    assert res.converged
    mu, _ = mean_model(res.beta, np.array([0.0, 1.0]), np.zeros((2, 1, 0)), 2)
    np.testing.assert_allclose(mu[:, 0, 0], [1 / 2, 2 / 3], atol=1e-10)


@pytest.mark.parametrize("structure", ["corr:ind", "corr:exch", "lor:unif"])
def test_converged_score_below_tolerance(complete_panel, structure):
    res = solve_gee(complete_panel, structure)
    assert res.converged
    assert res.score_norm < 1e-8
    U, _, _ = EstimatingEquation(complete_panel).evaluate(res.beta, res.alpha)
    assert np.max(np.abs(U.sum(axis=0))) < 1e-8


@pytest.fixture(scope="module")
def mild_panel():
    # weaker latent dependence keeps every working structure positive definite
    return generate_panel(Scenario(rho=0.3), np.random.default_rng(7))


@pytest.mark.parametrize("structure", STRUCTURES)
def test_vcov_symmetric_psd(mild_panel, structure):
    res = solve_gee(mild_panel, structure)
    assert res.converged
    np.testing.assert_allclose(res.vcov, res.vcov.T, atol=1e-14)
    assert np.linalg.eigvalsh(res.vcov)[0] > -1e-10


def test_unit_odds_matches_independence(complete_panel):
    ind = solve_gee(complete_panel, "corr:ind")
    spec = AssociationSpec.parse("lor:unif")
    eq = EstimatingEquation(complete_panel)
    alpha = AssociationEstimate(spec, np.zeros(1), log_theta=np.full((3, 2, 2), 1e-300),
                                pairs=((0, 1), (0, 2), (1, 2)))
    U, _, _ = eq.evaluate(ind.beta, alpha)
    assert np.max(np.abs(U.sum(axis=0))) < 1e-8


def test_efficiency_of_structured_z(complete_panel):
    se_ind = solve_gee(complete_panel, "corr:ind").se[3]
    assert solve_gee(complete_panel, "corr:exch").se[3] < se_ind
    assert solve_gee(complete_panel, "lor:unif").se[3] < se_ind


def test_fit_result_json(complete_panel):
    res = solve_gee(complete_panel, "corr:exch")
    data = json.loads(res.to_json())
    assert data["method"] == "gee"
    assert len(data["coefficients"]) == 4
    assert "beta01" in res.table()


def test_fit_dispatch_and_strict(complete_panel):
    assert fit(complete_panel, "gee", "corr:ind").method == "gee"
    with pytest.raises(ValueError):
        fit(complete_panel, "ols", "corr:ind")
    bad = solve_gee(complete_panel, "corr:ind", beta0=[0.0, 1.0, 0.0, 0.0])
    assert bad.converged
    with pytest.raises(NonConvergenceError):
        tiny = complete_panel.subset(np.arange(3))
        fit(tiny.replace(y=np.ones_like(tiny.y)), "gee", "corr:exch", strict=True)


# -- reductions on complete data -------------------------------------------------------


def test_one_dependent_failure_is_a_result(complete_panel):
    res = solve_gee(complete_panel, "corr:1dep")
    assert not res.converged
    assert "positive definite" in res.diagnostics["failure"]
    assert np.all(np.isnan(res.vcov))


@pytest.mark.parametrize("structure", STRUCTURES)
def test_weighted_and_dr_reduce_to_gee(mild_panel, structure):
    gee = solve_gee(mild_panel, structure)
    assert gee.converged
    wgee = solve_wgee(mild_panel, structure)
    drgee = solve_drgee(mild_panel, structure)
    migee = solve_migee(mild_panel, structure, M=2, rng=np.random.default_rng(0))
    for res in (wgee, drgee, migee):
        assert res.converged
        assert np.max(np.abs(res.beta - gee.beta)) < 1e-8
    np.testing.assert_allclose(drgee.vcov, gee.vcov, atol=1e-10)


def test_sandwich_complete_reduction(complete_panel):
    gee = solve_gee(complete_panel, "corr:exch")
    dr = solve_drgee(complete_panel, "corr:exch")
    models = fit_missingness_models(complete_panel)
    V = sandwich_dr(complete_panel, dr, models)
    np.testing.assert_allclose(V, gee.vcov, atol=1e-8)


# -- missing-data estimators ---------------------------------------------------------


@pytest.fixture(scope="module")
def models(incomplete_panel):
    return fit_missingness_models(incomplete_panel)


def test_wgee_and_drgee_run(incomplete_panel, models):
    for solver in (solve_wgee, solve_drgee):
        res = solver(incomplete_panel, "corr:ind", models=models)
        assert res.converged
        assert np.all(np.isfinite(res.se))
        assert res.diagnostics["truncated_weights"] >= 0


def test_migee_pools(incomplete_panel):
    res = solve_migee(incomplete_panel, "corr:ind", M=3, rng=np.random.default_rng(1))
    assert res.method == "migee"
    assert res.diagnostics["pooled"] == 3


def test_sandwich_dual_formula():
    scen = Scenario(n=600)
    panel = inject_missingness(generate_panel(scen, np.random.default_rng(21)), scen,
                               np.random.default_rng(22))
    models = fit_missingness_models(panel)
    res = solve_drgee(panel, "corr:ind", models=models)
    a = sandwich_dr(panel, res, models, cross="information")
    b = sandwich_dr(panel, res, models, cross="derivative")
    np.testing.assert_allclose(a, res.vcov, rtol=1e-10)
    assert np.linalg.norm(a - b) / np.linalg.norm(b) < 0.10


# -- augmentation oracles ---------------------------------------------------------------


def test_augmentation_zero_without_missingness(complete_panel):
    models = fit_missingness_models(complete_panel)
    probs = observation_probs(models, complete_panel)
    delta = build_weight_matrix(complete_panel.r_codes, probs, complete_panel.J)
    A = dr_augmentation(complete_panel, [-0.4, 1.2, -0.35, 0.35], "corr:ind", delta,
                        filtered_weights(complete_panel, models),
                        x_weight=_x_weight(complete_panel, probs, models))
    assert not np.any(A)


@pytest.fixture(scope="module")
def toy():
    return toy_problem()


@pytest.mark.parametrize("structure", ["corr:ind", "corr:exch", "lor:unif"])
def test_augmentation_brute_force(toy, structure):
    sub, models = toy
    got, expect = augmentation_pair(sub, models, np.array([-0.3, 1.1, -0.5, 0.4]), structure)
    assert np.abs(expect).max() > 1e-3
    np.testing.assert_allclose(got, expect, rtol=0, atol=1e-12)


def test_augmentation_single_occasion_two_terms():
    scen = Scenario(T=1, J=2, n=400, beta=(0.2, -0.5, 0.4))
    panel = inject_missingness(generate_panel(scen, np.random.default_rng(9)), scen,
                               np.random.default_rng(10))
    models = fit_missingness_models(panel)
    i = int(np.flatnonzero(~panel.x_observed)[0])
    sub = panel.subset(np.array([i]))
    probs = observation_probs(models, sub)
    delta = build_weight_matrix(sub.r_codes, probs, 2)
    beta = np.array([0.1, -0.4, 0.3])
    A = dr_augmentation(sub, beta, "corr:ind", delta, filtered_weights(sub, models),
                        x_weight=_x_weight(sub, probs, models))[0]
    # posterior of x given the observed response, then the score at each x
    p1 = models.covariate.prob_one(sub)[0]
    f0 = models.imputation.fits[0]
    z = sub.z[0, 0, 0]
    like = [ordinal_probs(f0.intercepts, f0.coef, np.array([[x, z]]))[0, sub.y[0, 0] - 1] for x in (0, 1)]
    post1 = p1 * like[1] / (p1 * like[1] + (1 - p1) * like[0])
    scores = []
    for x in (0.0, 1.0):
        mu = expit(beta[0] + beta[1] * x + beta[2] * z)
        y = float(sub.y[0, 0] == 1)
        scores.append(np.array([1.0, x, z]) * (y - mu))
    np.testing.assert_allclose(A, (1 - post1) * scores[0] + post1 * scores[1], atol=1e-12)


# -- multiple-imputation pooling --------------------------------------------------------


def _fake(beta, vcov):
    beta = np.atleast_1d(np.asarray(beta, float))
    return FitResult("gee", AssociationSpec.parse("corr:ind"), beta, np.atleast_2d(vcov),
                     None, True, 1, ["b"], 0.0, 10)


def test_mi_pool_arithmetic():
    res = mi_pool([_fake(0.0, 1.0), _fake(2.0, 1.0)])
    assert res.beta[0] == pytest.approx(1.0)
    assert res.diagnostics["between"][0, 0] == pytest.approx(2.0)
    assert res.vcov[0, 0] == pytest.approx(4.0)


def test_mi_pool_identical():
    res = mi_pool([_fake(0.7, 0.3)] * 4)
    assert res.beta[0] == pytest.approx(0.7)
    assert res.vcov[0, 0] == pytest.approx(0.3)


def test_mi_pool_needs_two():
    with pytest.raises(PoolingError):
        mi_pool([_fake(0.0, 1.0)])
