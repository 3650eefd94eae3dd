"""Independent reference computations shared by the unit and acceptance tests."""

import numpy as np
from scipy.special import expit

from ordgee.association import AssociationEstimate, AssociationSpec, assemble_working_covariance
from ordgee.estimators import _x_weight, _y_weight, dr_augmentation
from ordgee.missingness import (
    ModelConfig,
    build_weight_matrix,
    filtered_weights,
    fit_missingness_models,
    observation_probs,
)
from ordgee.ordinal import ordinal_probs
from ordgee.panel import indicator_block, mean_model
from ordgee.simulation import Scenario, generate_panel, inject_missingness


def pooled_ml(panel):
    """Proportional-odds ML on the stacked subject-occasions (statsmodels)."""
    from statsmodels.miscmodels.ordinal_model import OrderedModel

    exog = np.column_stack([np.repeat(panel.x, panel.T), panel.z.reshape(-1, panel.q)])
    res = OrderedModel(panel.y.reshape(-1), exog, distr="logit").fit(method="newton", disp=False,
                                                                     tol=1e-12, maxiter=200)
    k = exog.shape[1]
    thr = res.params[k:]
    cuts = np.concatenate([[thr[0]], thr[0] + np.cumsum(np.exp(thr[1:]))])
    # statsmodels writes Pr(O <= j) = F(thr_j - x'b)
    return np.concatenate([cuts, -res.params[:k]])


def toy_problem(seed=5):
    """T=2, J=3, binary-X panel with a handful of subjects of every pattern."""
    scen = Scenario(T=2, n=400)
    panel = inject_missingness(generate_panel(scen, np.random.default_rng(seed)), scen,
                               np.random.default_rng(seed + 1))
    # rprev is constant when only the second occasion can be missing
    models = fit_missingness_models(panel, ModelConfig(missing_y=["oprev", "z1"]))
    cand = np.flatnonzero(~panel.x_observed & ~panel.observed[:, 1])[:3]
    other = np.flatnonzero(panel.x_observed & ~panel.observed[:, 1])[:3]
    full = np.flatnonzero(panel.x_observed & panel.observed.all(axis=1))[:3]
    xonly = np.flatnonzero(~panel.x_observed & panel.observed.all(axis=1))[:3]
    return panel.subset(np.concatenate([cand, other, full, xonly])), models


def toy_association(structure):
    spec = AssociationSpec.parse(structure)
    if spec.family == "corr":
        rho = np.zeros((2, 2, 2, 2))
        if not spec.is_independence:
            rho[0, 1] = [[0.2, 0.05], [0.02, 0.15]]
            rho[1, 0] = rho[0, 1].T
        return AssociationEstimate(spec, np.ones(1), rho=rho)
    return AssociationEstimate(spec, np.ones(1), log_theta=np.full((1, 2, 2), 0.7), pairs=((0, 1),))


def _imputation_probs(models, t, x, z, oprev=None):
    f = models.imputation.fits[t]
    row = [x, z] if t == 0 else [x, z, oprev == 1, oprev == 2]
    return ordinal_probs(f.intercepts, f.coef, np.array([row], dtype=float))[0]


def hand_weights(sub, models, i, s, x):
    """Law of O_s given Z, O_1 and X = x (O_s itself masked for s > 0)."""
    z = sub.z[i, :, 0]
    o1 = sub.y[i, 0]
    if s == 0:
        return [(o1, 1.0)]
    pr = _imputation_probs(models, 1, x, z[1], o1)
    return [(c, pr[c - 1]) for c in (1, 2, 3)]


def hand_posterior(sub, models, i):
    """Pr(X = 1 | Z, every observed response) by Bayes' rule."""
    z = sub.z[i, :, 0]
    p1 = expit(models.covariate.params @ [1.0, z[0]])
    like = []
    for x in (0.0, 1.0):
        w = _imputation_probs(models, 0, x, z[0])[sub.y[i, 0] - 1]
        if sub.observed[i, 1]:
            w *= _imputation_probs(models, 1, x, z[1], sub.y[i, 0])[sub.y[i, 1] - 1]
        like.append(w)
    return p1 * like[1] / (p1 * like[1] + (1 - p1) * like[0])


def augmentation_pair(sub, models, beta, structure):
    """Package augmentation and its exhaustive enumeration on a T=2, J=3 toy."""
    spec = AssociationSpec.parse(structure)
    alpha = toy_association(structure)
    probs = observation_probs(models, sub)
    delta = build_weight_matrix(sub.r_codes, probs, 3)
    xw = _x_weight(sub, probs, models)
    yw = _y_weight(sub, probs, models)
    got = dr_augmentation(sub, beta, spec, delta, filtered_weights(sub, models), alpha=alpha,
                          x_weight=xw, y_weight=yw)
    expect = np.zeros_like(got)

    def score(i, x, s, ybar, coef):
        mu, D = mean_model(beta, np.array([x]), sub.z[i:i + 1], 3)
        V = assemble_working_covariance(mu, alpha)[0]
        assert np.linalg.eigvalsh(V)[0] > 1e-6
        cols = slice(2 * s, 2 * s + 2)
        return D.reshape(4, 4).T @ (np.linalg.inv(V) * coef)[:, cols] @ (ybar - mu[0, s])

    for i in range(sub.n):
        post1 = hand_posterior(sub, models, i)
        for s in (0, 1):
            # X kept: coefficient R^x/pi^x - Delta on E[Y_s | X, history]
            if sub.x_observed[i]:
                ybar = sum(w * indicator_block(c, 3) for c, w in hand_weights(sub, models, i, s, sub.x[i]))
                expect[i] += score(i, sub.x[i], s, ybar, xw[i] - delta[i])
            # X integrated over its posterior: coefficient 1 - R^x/pi^x on b Y_s + (1 - b) E[Y_s | x, history]
            yobs = indicator_block(sub.y[i, s], 3) if sub.observed[i, s] else np.zeros(2)
            for x, px in ((0.0, 1.0 - post1), (1.0, post1)):
                ybar = sum(w * indicator_block(c, 3) for c, w in hand_weights(sub, models, i, s, x))
                ytil = yw[i, s] * yobs + (1.0 - yw[i, s]) * ybar
                expect[i] += px * score(i, x, s, ytil, np.full((4, 4), 1.0 - xw[i]))
    return got, expect
