"""GEE, WGEE, DRGEE and MIGEE for marginal cumulative-logit models.

All four methods share one Fisher-scoring driver. A method is described
by the weight matrix applied to the inverse working covariance (none for
GEE, ``Delta_i`` for WGEE) and, for DRGEE, an augmentation term built from
predictive completions of each subject's missing data.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import ndtr

from ._accel import score_and_info
from .association import (
    AssociationEstimate,
    AssociationSpec,
    assemble_working_covariance,
    build_marginalized_tables,
    estimate_correlation_dr,
    estimate_correlation_moments,
    estimate_correlation_weighted,
    fit_rc_loglinear,
    independence_estimate,
    pearson_residuals,
    shrink_to_pd,
)
from .exceptions import (
    AssociationFitError,
    ImputationError,
    InsufficientDataError,
    IPFPError,
    NonConvergenceError,
    PoolingError,
)
from .missingness import (
    Completions,
    FilteredCompletions,
    MissingnessModels,
    ModelConfig,
    build_weight_matrix,
    fcs_impute,
    filtered_weights,
    fit_missingness_models,
    observation_probs,
    predictive_weights,
    x_support,
)
from .panel import OrdinalPanel, RegressionParams, indicators_3d, mean_model

SCHEMA_VERSION = 1
SCORE_TOL = 1e-8
STEP_TOL = 1e-6
MAX_ITER = 50
MAX_HALVING = 10
METHODS = ("gee", "wgee", "migee", "drgee")

_FIT_FAILURES = (InsufficientDataError, AssociationFitError, IPFPError, np.linalg.LinAlgError)


@dataclass
class FitResult:
    """Outcome of one fit.

    ``vcov`` estimates Var(beta_hat) directly (no further division by n).
    """

    method: str
    spec: AssociationSpec
    beta: np.ndarray
    vcov: np.ndarray
    alpha: AssociationEstimate
    converged: bool
    iterations: int
    param_names: list
    score_norm: float = float("nan")
    n: int = 0
    diagnostics: dict = field(default_factory=dict)
    trace: list = field(default_factory=list)

    @property
    def params(self) -> RegressionParams:
        J = 1 + sum(1 for nm in self.param_names if nm.startswith("beta0"))
        return RegressionParams.from_vector(self.beta, J)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.vcov), 0.0, None))

    @property
    def zscores(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.beta / self.se

    @property
    def pvalues(self) -> np.ndarray:
        return 2.0 * ndtr(-np.abs(self.zscores))

    def to_dict(self) -> dict:
        def num(v):
            v = float(v)
            return v if math.isfinite(v) else None

        coefs = [
            {"name": nm, "estimate": num(b), "se": num(s), "z": num(z), "p_value": num(pv)}
            for nm, b, s, z, pv in zip(self.param_names, self.beta, self.se, self.zscores, self.pvalues)
        ]
        return {
            "schema_version": SCHEMA_VERSION,
            "method": self.method,
            "association": str(self.spec),
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "n_subjects": int(self.n),
            "score_norm": num(self.score_norm),
            "coefficients": coefs,
            "vcov": [[num(v) for v in row] for row in np.asarray(self.vcov)],
            "alpha": self.alpha.to_dict() if self.alpha is not None else None,
            "diagnostics": _jsonable(self.diagnostics),
            "trace": _jsonable(self.trace),
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    def table(self) -> str:
        """Aligned Est./SE/p-value table."""
        width = max(9, max(len(nm) for nm in self.param_names))
        lines = [f"{'Parameter':<{width}}  {'Est.':>9}  {'SE':>9}  {'p-value':>9}"]
        for nm, b, s, pv in zip(self.param_names, self.beta, self.se, self.pvalues):
            lines.append(f"{nm:<{width}}  {b:>9.4f}  {s:>9.4f}  {_fmt_p(pv):>9}")
        return "\n".join(lines)


def _fmt_p(p) -> str:
    if not np.isfinite(p):
        return "nan"
    return "<0.001" if p < 0.001 else f"{p:.3f}"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


# ---------------------------------------------------------------------------
# shared building blocks


def _masked_inverse(V, active):
    """Inverse of the active submatrix of each V_i, zero elsewhere."""
    K = V.shape[-1]
    mm = active[:, :, None] & active[:, None, :]
    inv = np.linalg.inv(np.where(mm, V, np.eye(K)))
    return np.where(mm, inv, 0.0)


def _start_values(panel: OrdinalPanel) -> np.ndarray:
    """Marginal cumulative logits as intercepts, zero slopes."""
    y = panel.y[panel.observed]
    counts = np.bincount(y - 1, minlength=panel.J).astype(float) + 0.5
    cum = np.cumsum(counts)[:-1] / counts.sum()
    return np.concatenate([np.log(cum / (1 - cum)), np.zeros(1 + panel.q)])


@dataclass
class _AugmentationData:
    """Predictive summaries used by the DR augmentation.

    One row per (level, subject, candidate x) support point. Level-0 rows
    keep the observed X: ``prob[:, k]`` is the probability of that x given
    the history behind occasion k's response weight and ``ybar[:, k]`` the
    conditional mean of the indicator given x and that history. Level-1
    rows integrate X out: ``prob`` is the posterior of x given all observed
    data and ``ybar`` the response-level augmented indicator
    ``b Y + (1 - b) E[Y | x, history]`` with ``b = R^y / pi^y``.
    ``x_weight`` is ``R^x / pi^x`` per subject.
    """

    subject: np.ndarray
    x: np.ndarray
    level: np.ndarray
    prob: np.ndarray  # (rows, K)
    ybar: np.ndarray  # (rows, K)
    x_weight: np.ndarray  # (n,)
    completions: FilteredCompletions


def _collapse(panel, cols):
    T, m = panel.T, panel.J - 1
    key = np.concatenate([np.stack([c.subject.astype(float), c.x], axis=1) for c in cols])
    uniq, inv = np.unique(key, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    rows = len(uniq)
    prob = np.zeros((rows, T))
    ybar = np.zeros((rows, T, m))
    start = 0
    for s, c in enumerate(cols):
        ix = inv[start:start + len(c)]
        start += len(c)
        np.add.at(prob[:, s], ix, c.weight)
        np.add.at(ybar[:, s], ix, indicators_3d(c.y[:, s], panel.J) * c.weight[:, None])
    with np.errstate(invalid="ignore", divide="ignore"):
        ybar = np.where(prob[:, :, None] > 0, ybar / prob[:, :, None], 0.0)
    return uniq[:, 0].astype(np.int64), uniq[:, 1], prob, ybar


def build_augmentation_data(panel: OrdinalPanel, completions, x_weight=None,
                            y_weight=None) -> _AugmentationData:
    """Collapse completions to per-(subject, x) weights and conditional means.

    ``completions`` is a :class:`FilteredCompletions`; a plain
    :class:`Completions` (conditioning every occasion on all observed data)
    is accepted and used for every occasion. With ``x_weight=None`` the
    X-observation weight is taken as one, so the augmentation reduces to a
    single level with complement weights ``1 - Delta``. ``y_weight`` is
    ``R^y / pi^y`` per subject-occasion (default ``R^y``).
    """
    if isinstance(completions, Completions):
        completions = FilteredCompletions((completions,) * panel.T)
    m = panel.J - 1
    xw = np.ones(panel.n) if x_weight is None else np.asarray(x_weight, dtype=float)
    subj, x, prob, ybar = _collapse(panel, completions.columns)
    out = [(subj, x, np.zeros(subj.size, dtype=np.int8), np.repeat(prob, m, axis=1),
            ybar.reshape(subj.size, -1))]
    if completions.posterior is not None and x_weight is not None:
        yw = panel.observed.astype(float) if y_weight is None else np.asarray(y_weight, dtype=float)
        s1, x1, post = x_support(completions.posterior)
        sg, xg, _, ybar_h = _collapse(panel, completions.given_x)
        if not (np.array_equal(s1, sg) and np.array_equal(x1, xg)):
            raise ImputationError("posterior and history completions disagree on the x support")
        b = yw[s1][:, :, None]
        Yobs = indicators_3d(panel.y, panel.J)[s1]
        ytil = b * Yobs + (1.0 - b) * ybar_h
        out.append((s1, x1, np.ones(s1.size, dtype=np.int8),
                    np.repeat(post[:, None], panel.T * m, axis=1), ytil.reshape(s1.size, -1)))
    subj, x, level, prob, ybar = (np.concatenate(v) for v in zip(*out))
    return _AugmentationData(subj, x, level, prob, ybar, xw, completions)


class EstimatingEquation:
    """U(beta) = sum_i D_i' W_i (Y_i - mu_i) [+ augmentation] for one method.

    Parameters
    ----------
    panel : data (for GEE: occasions lacking O or X are ignored)
    delta : (n, K, K) weight matrices or None (plain GEE)
    aug : predictive summaries for the DR augmentation, or None
    """

    def __init__(self, panel: OrdinalPanel, delta=None, aug: Optional[_AugmentationData] = None):
        self.panel = panel
        self.delta = delta
        self.aug = aug
        n, T, m = panel.n, panel.T, panel.J - 1
        self.x = np.nan_to_num(panel.x)
        usable = panel.observed & panel.x_observed[:, None]
        self.resid_mask = np.repeat(usable, m, axis=1)
        self.Y = indicators_3d(panel.y, panel.J).reshape(n, T * m)
        if delta is None:
            self.active = self.resid_mask
        else:
            self.active = np.repeat(panel.present, m, axis=1)
        self.present_k = np.repeat(panel.present, m, axis=1)

    def _weighted_inverse(self, mu, alpha, active, weights):
        V = assemble_working_covariance(mu, alpha)
        V, eps = shrink_to_pd(V, active)
        if np.isinf(eps).any():
            raise np.linalg.LinAlgError("working covariance could not be made positive definite")
        W = _masked_inverse(V, active)
        if weights is not None:
            W = W * weights
        return W, eps

    def evaluate(self, beta, alpha: AssociationEstimate):
        """Per-subject contributions ``U_i`` (n, p), summed ``H`` (p, p), shrink eps."""
        panel = self.panel
        n, p = panel.n, panel.p
        mu, D = mean_model(beta, self.x, panel.z, panel.J)
        K = self.Y.shape[1]
        W, eps = self._weighted_inverse(mu, alpha, self.active, self.delta)
        r = np.where(self.resid_mask, self.Y - mu.reshape(n, K), 0.0)
        U, H = score_and_info(D.reshape(n, K, p), W, r)
        if self.aug is not None:
            Ua, Ha, _ = self._augmentation(beta, alpha)
            U = U + Ua
            H = H + Ha
        return U, H, eps

    def _augmentation(self, beta, alpha):
        aug, panel = self.aug, self.panel
        s = aug.subject
        rows = s.size
        mu, D = mean_model(beta, aug.x, panel.z[s], panel.J)
        K = self.Y.shape[1]
        active = self.present_k[s]
        # coefficient R^x/pi^x - Delta with X kept, 1 - R^x/pi^x with X integrated out
        xw = aug.x_weight[s][:, None, None]
        comp = np.where(aug.level[:, None, None] == 0, xw - self.delta[s], 1.0 - xw)
        W, eps = self._weighted_inverse(mu, alpha, active, comp * aug.prob[:, None, :])
        r = np.where(active, aug.ybar - mu.reshape(rows, K), 0.0)
        Ur, H = score_and_info(D.reshape(rows, K, panel.p), W, r)
        U = np.zeros((panel.n, panel.p))
        np.add.at(U, s, Ur)
        return U, H, eps

    def augmentation(self, beta, alpha) -> np.ndarray:
        """Per-subject augmentation vectors (zeros when no DR term)."""
        if self.aug is None:
            return np.zeros((self.panel.n, self.panel.p))
        return self._augmentation(beta, alpha)[0]


# ---------------------------------------------------------------------------
# association estimation per method


def _gee_association(panel, spec, dof_adjust):
    """Returns a callable beta -> AssociationEstimate for plain GEE."""
    T, J = panel.T, panel.J
    if spec.is_independence:
        est = independence_estimate(spec, T, J)
        return lambda beta: est, False
    if spec.family == "lor":
        est = fit_rc_loglinear(build_marginalized_tables(panel.available_case()), spec.structure, spec=spec)
        return lambda beta: est, False

    def corr(beta):
        e, usable = _residuals(panel, beta)
        return estimate_correlation_moments(e, usable, spec.structure, panel.p, dof_adjust, spec)

    return corr, True


def _residuals(panel, beta):
    usable = panel.observed & panel.x_observed[:, None]
    mu, _ = mean_model(beta, np.nan_to_num(panel.x), panel.z, panel.J)
    e = pearson_residuals(indicators_3d(panel.y, panel.J), mu)
    return np.where(usable[:, :, None], e, 0.0), usable


def _weighted_association(panel, spec, probs, dof_adjust, expected_cross=None, omega=0.5):
    T, J = panel.T, panel.J
    if spec.is_independence:
        est = independence_estimate(spec, T, J)
        return lambda beta: est, False
    if spec.family == "lor":
        # pairwise-complete tables; the association is not reweighted
        est = fit_rc_loglinear(build_marginalized_tables(panel), spec.structure, spec=spec)
        return lambda beta: est, False

    def corr(beta):
        e, usable = _residuals(panel, beta)
        if expected_cross is None:
            return estimate_correlation_weighted(e, usable, probs.pi_occ, probs.pi_both, panel.present,
                                                 spec.structure, panel.p, dof_adjust, spec)
        return estimate_correlation_dr(e, usable, probs.pi_occ, probs.pi_both, panel.present,
                                       expected_cross(beta), spec.structure, panel.p, omega,
                                       dof_adjust, spec)

    return corr, True


def _expected_cross_fn(panel: OrdinalPanel, comps: Completions):
    """beta -> E[e_t e_s' | observed data] under the predictive completions."""
    n, T, m = panel.n, panel.T, panel.J - 1
    s = comps.subject
    Yc = indicators_3d(comps.y, panel.J)

    def fn(beta):
        mu, _ = mean_model(beta, comps.x, panel.z[s], panel.J)
        e = pearson_residuals(Yc, mu)
        cross = comps.weight[:, None, None, None, None] * e[:, :, None, :, None] * e[:, None, :, None, :]
        out = np.zeros((n, T, T, m, m))
        np.add.at(out, s, cross)
        return out

    return fn


# ---------------------------------------------------------------------------
# Fisher scoring driver


def _intercepts_ok(beta, J) -> bool:
    return bool(np.all(np.isfinite(beta)) and np.all(np.diff(beta[: J - 1]) > 0))


def _line_search(equation, alpha, beta, step, norm, score_tol):
    """Step halving along ``step``; best candidate ``(beta, U, H, norm, eps, lam)``."""
    J = equation.panel.J
    lam = 1.0
    accepted = None
    for _ in range(MAX_HALVING + 1):
        cand = beta + lam * step
        if _intercepts_ok(cand, J):
            try:
                Uc, Hc, ec = equation.evaluate(cand, alpha)
            except np.linalg.LinAlgError:
                Uc = None
            if Uc is not None:
                nc = float(np.max(np.abs(Uc.sum(axis=0))))
                if accepted is None or nc < accepted[3]:
                    accepted = (cand, Uc, Hc, nc, ec, lam)
                if nc < norm or nc < score_tol:
                    break
        lam *= 0.5
    return accepted


def _score_jacobian(equation, alpha, beta, h: float = 1e-6) -> np.ndarray:
    """Minus the central-difference Jacobian of the summed score at fixed alpha."""
    p = beta.size
    jac = np.zeros((p, p))
    for k in range(p):
        e = np.zeros(p)
        e[k] = h
        up = equation.evaluate(beta + e, alpha)[0].sum(axis=0)
        dn = equation.evaluate(beta - e, alpha)[0].sum(axis=0)
        jac[:, k] = -(up - dn) / (2 * h)
    return jac


def fisher_scoring(equation: EstimatingEquation, association: Callable, beta0, update_alpha: bool,
                   max_iter: int = MAX_ITER, score_tol: float = SCORE_TOL, step_tol: float = STEP_TOL):
    """Solve U(beta) = 0 with step halving on the score max-norm.

    Returns ``(beta, alpha, converged, iterations, trace, info)`` where
    ``info`` carries the final per-subject scores, information and shrinkage.
    """
    beta = np.array(beta0, dtype=float)
    alpha = association(beta)
    U, H, eps = equation.evaluate(beta, alpha)
    norm = float(np.max(np.abs(U.sum(axis=0))))
    trace = [{"iteration": 0, "score_norm": norm, "step": None}]
    last_step = np.inf
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        if norm < score_tol and last_step < step_tol:
            converged = True
            it -= 1
            break
        accepted = _line_search(equation, alpha, beta, np.linalg.solve(H, U.sum(axis=0)), norm, score_tol)
        if accepted is None or accepted[3] >= norm:
            # Fisher direction is not a descent direction (asymmetric weights):
            # retry with the finite-difference Jacobian of the summed score
            try:
                jac = _score_jacobian(equation, alpha, beta)
                alt = _line_search(equation, alpha, beta, np.linalg.solve(jac, U.sum(axis=0)), norm,
                                   score_tol)
            except np.linalg.LinAlgError:
                alt = None
            if alt is not None and (accepted is None or alt[3] < accepted[3]):
                accepted = alt
        if accepted is None:
            break
        cand, U, H, nc, eps, lam = accepted
        last_step = float(np.max(np.abs(cand - beta)))
        beta = cand
        if update_alpha:
            alpha = association(beta)
            U, H, eps = equation.evaluate(beta, alpha)
        norm = float(np.max(np.abs(U.sum(axis=0))))
        trace.append({"iteration": it, "score_norm": norm, "step": last_step, "halving": lam})
    else:
        converged = norm < score_tol and last_step < step_tol
    info = {"U": U, "H": H, "eps": eps, "score_norm": norm}
    return beta, alpha, converged, it, trace, info


# ---------------------------------------------------------------------------
# sandwich covariance


def _regress_out(S1, S, diag, label):
    """S1 - mean(S1 S') mean(S S')^{-1} S (information-equality projection)."""
    if S is None or S.shape[1] == 0:
        return np.zeros_like(S1)
    n = S1.shape[0]
    I12 = S1.T @ S / n
    I2 = S.T @ S / n
    try:
        cond = np.linalg.cond(I2)
        if not np.isfinite(cond) or cond > 1e12:
            raise np.linalg.LinAlgError
        coef = np.linalg.solve(I2, I12.T).T
    except np.linalg.LinAlgError:
        coef = I12 @ np.linalg.pinv(I2)
        diag.setdefault("pinv", []).append(label)
    return S @ coef.T


def sandwich(H, Q) -> np.ndarray:
    """H^{-1} (sum_i Q_i Q_i') H^{-T}, symmetrised."""
    Hinv = np.linalg.inv(H)
    V = Hinv @ (Q.T @ Q) @ Hinv.T
    return 0.5 * (V + V.T)


def corrected_scores(S1, S2=None, S3=None, diag=None, I12=None, I2=None, I13=None, I3=None):
    """Q_i = S1_i - I12 I2^{-1} S2_i - I13 I3^{-1} S3_i.

    Cross matrices default to the information-equality estimates
    (``I12 = -mean S1 S2'``, ``I2 = -mean S2 S2'``); explicit derivative
    matrices may be supplied instead.
    """
    diag = {} if diag is None else diag
    Q = S1.copy()
    for S, Ia, Ib, label in ((S2, I12, I2, "missingness"), (S3, I13, I3, "covariate")):
        if S is None or S.shape[1] == 0:
            continue
        if Ia is None:
            Q = Q - _regress_out(S1, S, diag, label)
        else:
            Q = Q - (Ia @ np.linalg.pinv(Ib) @ S.T).T
    return Q


# ---------------------------------------------------------------------------
# public solvers


def _result(method, spec, panel, beta, alpha, converged, it, trace, info, vcov, diag):
    return FitResult(method, spec, beta, vcov, alpha, bool(converged), int(it), panel.param_names,
                     float(info.get("score_norm", np.nan)) if info else float("nan"), panel.n, diag,
                     trace)


def _failed(method, spec, panel, beta, reason, diag=None, trace=None):
    p = panel.p
    d = dict(diag or {})
    d["failure"] = reason
    alpha = independence_estimate(spec, panel.T, panel.J)
    return FitResult(method, spec, np.asarray(beta, float), np.full((p, p), np.nan), alpha, False, 0,
                     panel.param_names, float("nan"), panel.n, d, list(trace or []))


def _solve(method, panel, spec, equation, make_assoc, beta0, diag, corrections, dof_adjust=True):
    """Independence warm start, then the structured fit and sandwich."""
    ind = AssociationSpec(spec.family, "independent")
    b0 = _start_values(panel) if beta0 is None else np.asarray(beta0, float)
    try:
        assoc_ind, upd = make_assoc(ind)
        b_ind, *_rest = fisher_scoring(equation, assoc_ind, b0, upd)
        conv_ind = _rest[1]
        if not spec.is_independence:
            start = b_ind if conv_ind else b0
            assoc, upd = make_assoc(spec)
        else:
            start, assoc, upd = b0, assoc_ind, False
        if spec.is_independence:
            beta, alpha, conv, it, trace, info = (b_ind, *_rest)
        else:
            beta, alpha, conv, it, trace, info = fisher_scoring(equation, assoc, start, upd)
    except _FIT_FAILURES as exc:
        return _failed(method, panel=panel, spec=spec, beta=b0, reason=f"{type(exc).__name__}: {exc}",
                       diag=diag)
    eps = info["eps"]
    diag = dict(diag)
    diag["shrinkage_subjects"] = int(np.sum(eps > 0))
    if np.any(eps > 0):
        diag["max_shrinkage"] = float(np.max(eps))
    S1 = info["U"]
    Q = corrections(S1, diag) if corrections is not None else S1
    try:
        vcov = sandwich(info["H"], Q)
    except np.linalg.LinAlgError:
        vcov = np.full((panel.p, panel.p), np.nan)
        conv = False
        diag["failure"] = "singular information matrix"
    return _result(method, spec, panel, beta, alpha, conv, it, trace, info, vcov, diag)


def solve_gee(panel: OrdinalPanel, spec, beta0=None, dof_adjust: bool = True) -> FitResult:
    """Complete-data or available-data GEE.

    Occasions lacking the response or X are dropped (available-case
    analysis); on a fully observed panel this is the ordinary GEE.
    """
    spec = _as_spec(spec)
    eq = EstimatingEquation(panel)

    def make(sp):
        return _gee_association(panel, sp, dof_adjust)

    return _solve("gee", panel, spec, eq, make, beta0, {}, None)


def _probs_and_delta(panel, models, kind="sequential", full_y=None):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        probs = observation_probs(models, panel, kind=kind, full_y=full_y)
    delta = build_weight_matrix(panel.r_codes, probs, panel.J)
    return probs, delta


def _x_weight(panel, probs, models) -> np.ndarray:
    """``R^x / pi^x`` per subject, with the probability floored like Delta."""
    return panel.x_observed / np.maximum(probs.pi_x, models.config.weight_floor)


def _y_weight(panel, probs, models) -> np.ndarray:
    """``R^y_t / pi^y_t`` per subject-occasion, floored like Delta."""
    return panel.observed / np.maximum(probs.py, models.config.weight_floor)


def _dr_data(panel, models, probs, rng=None) -> _AugmentationData:
    return build_augmentation_data(panel, filtered_weights(panel, models, rng=rng),
                                   _x_weight(panel, probs, models), _y_weight(panel, probs, models))


def solve_wgee(panel: OrdinalPanel, spec, models: Optional[MissingnessModels] = None,
               config: Optional[ModelConfig] = None, beta0=None, dof_adjust: bool = True) -> FitResult:
    """Inverse-probability weighted GEE with ``M_i = V_i^{-1} o Delta_i``."""
    spec = _as_spec(spec)
    if models is None:
        models = fit_missingness_models(panel, config, need_predictive=False)
    probs, delta = _probs_and_delta(panel, models)
    eq = EstimatingEquation(panel, delta=delta)
    diag = {"truncated_weights": probs.truncated, "penalized_models": list(models.penalized)}
    S2 = models.missingness_scores(panel)

    def make(sp):
        return _weighted_association(panel, sp, probs, dof_adjust)

    def corr(S1, d):
        return corrected_scores(S1, S2, None, d)

    return _solve("wgee", panel, spec, eq, make, beta0, diag, corr)


def dr_augmentation(panel: OrdinalPanel, beta, spec, delta, completions,
                    alpha: Optional[AssociationEstimate] = None, x_weight=None,
                    y_weight=None) -> np.ndarray:
    """Per-subject augmentation ``E[D_i N_i (Y_i - mu_i) | history]``.

    ``N_i = V_i^{-1} o (11' - Delta_i)``; column k of the residual is
    averaged over the completions of ``completions`` (filtered or plain,
    see :func:`build_augmentation_data`). Given ``x_weight`` (``R^x /
    pi^x``), the complement splits into ``x_weight - Delta`` on completions
    that keep the observed X and ``1 - x_weight`` on the posterior of X
    given all observed data, where each occasion's residual is the
    response-level augmented indicator built from ``y_weight``
    (``R^y / pi^y``). ``alpha`` defaults to working independence.
    """
    spec = _as_spec(spec)
    if alpha is None:
        alpha = independence_estimate(spec, panel.T, panel.J)
    eq = EstimatingEquation(panel, delta=delta,
                            aug=build_augmentation_data(panel, completions, x_weight, y_weight))
    return eq.augmentation(np.asarray(beta, float), alpha)


def solve_drgee(panel: OrdinalPanel, spec, models: Optional[MissingnessModels] = None,
                config: Optional[ModelConfig] = None, beta0=None, rng=None,
                dof_adjust: bool = True) -> FitResult:
    """Doubly robust GEE: WGEE score plus the predictive augmentation."""
    spec = _as_spec(spec)
    if models is None:
        models = fit_missingness_models(panel, config, need_predictive=True)
    config = models.config
    probs, delta = _probs_and_delta(panel, models)
    comps = predictive_weights(panel, models, rng=rng)
    eq = EstimatingEquation(panel, delta=delta, aug=_dr_data(panel, models, probs, rng))
    diag = {"truncated_weights": probs.truncated, "monte_carlo_subjects": len(comps.monte_carlo),
            "completions": len(comps), "penalized_models": list(models.penalized)}
    S2 = models.missingness_scores(panel)
    S3 = models.covariate_scores(panel)
    cross = _expected_cross_fn(panel, comps)

    def make(sp):
        return _weighted_association(panel, sp, probs, dof_adjust, expected_cross=cross, omega=config.omega)

    def corr(S1, d):
        return corrected_scores(S1, S2, S3, d)

    return _solve("drgee", panel, spec, eq, make, beta0, diag, corr)


def mi_pool(fits: Sequence[FitResult]) -> FitResult:
    """Combine imputation fits: mean estimate, W + (M+1)/M B covariance."""
    good = [f for f in fits if f.converged]
    if len(good) < 2:
        raise PoolingError(f"need at least 2 converged fits to pool, got {len(good)}")
    M = len(good)
    B_all = np.array([f.beta for f in good])
    beta = B_all.mean(axis=0)
    W = np.mean([f.vcov for f in good], axis=0)
    B = np.cov(B_all, rowvar=False, ddof=1).reshape(beta.size, beta.size)
    vcov = W + (M + 1) / M * B
    vcov = 0.5 * (vcov + vcov.T)
    first = good[0]
    diag = {"imputations": len(fits), "pooled": M, "within": W, "between": B}
    return FitResult("migee", first.spec, beta, vcov, first.alpha, True,
                     int(max(f.iterations for f in good)), first.param_names,
                     float(np.mean([f.score_norm for f in good])), first.n, diag, [])


def solve_migee(panel: OrdinalPanel, spec, M: int = 10, rng=None, config: Optional[ModelConfig] = None,
                beta0=None, dof_adjust: bool = True, completed: Optional[Sequence[OrdinalPanel]] = None
                ) -> FitResult:
    """Multiple imputation (chained equations) followed by GEE and pooling.

    ``completed`` may carry previously imputed panels (e.g. shared across
    association structures); otherwise ``M`` are drawn with ``rng``.
    """
    spec = _as_spec(spec)
    config = config or ModelConfig()
    if completed is None:
        rng = np.random.default_rng() if rng is None else rng
        completed = fcs_impute(panel, M, rng, config)
    fits = [solve_gee(c, spec, beta0=beta0, dof_adjust=dof_adjust) for c in completed]
    try:
        return mi_pool(fits)
    except PoolingError as exc:
        return _failed("migee", panel=panel, spec=spec, beta=fits[0].beta, reason=str(exc))


def fit(panel: OrdinalPanel, method: str, spec, models: Optional[MissingnessModels] = None,
        config: Optional[ModelConfig] = None, rng=None, strict: bool = False, **kw) -> FitResult:
    """Dispatch on ``method``; with ``strict`` a non-converged fit raises."""
    method = method.lower()
    if method == "gee":
        res = solve_gee(panel, spec, **kw)
    elif method == "wgee":
        res = solve_wgee(panel, spec, models=models, config=config, **kw)
    elif method == "drgee":
        res = solve_drgee(panel, spec, models=models, config=config, rng=rng, **kw)
    elif method == "migee":
        cfg = config or (models.config if models is not None else ModelConfig())
        res = solve_migee(panel, spec, M=cfg.imputations, rng=rng, config=cfg, **kw)
    else:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    if strict and not res.converged:
        raise NonConvergenceError(f"{method} with {res.spec} did not converge: "
                                  f"{res.diagnostics.get('failure', 'iteration limit reached')}", res)
    return res


def _as_spec(spec) -> AssociationSpec:
    return spec if isinstance(spec, AssociationSpec) else AssociationSpec.parse(str(spec))


# ---------------------------------------------------------------------------
# sandwich with explicit cross-derivatives (self-check)


def sandwich_dr(panel: OrdinalPanel, result: FitResult, models: MissingnessModels,
                cross: str = "information", rng=None, h: float = 1e-5) -> np.ndarray:
    """Nuisance-corrected sandwich for a WGEE/DRGEE fit.

    ``cross="information"`` uses the generalized information equality for
    the cross matrices (as in the fitted result); ``cross="derivative"``
    uses central finite differences of the subject scores with respect to
    the missingness and covariate parameters and the analytic information
    of those models.
    """
    beta, alpha = result.beta, result.alpha
    method = result.method
    if method not in ("wgee", "drgee", "gee"):
        raise ValueError("sandwich_dr applies to gee, wgee and drgee fits")

    def equation(mods):
        if method == "gee":
            return EstimatingEquation(panel)
        probs, delta = _probs_and_delta(panel, mods)
        aug = None
        if method == "drgee":
            aug = _dr_data(panel, mods, probs, rng)
        return EstimatingEquation(panel, delta=delta, aug=aug)

    U, H, _ = equation(models).evaluate(beta, alpha)
    if method == "gee":
        return sandwich(H, U)
    S2 = models.missingness_scores(panel)
    S3 = models.covariate_scores(panel) if method == "drgee" else np.zeros((panel.n, 0))
    diag: dict = {}
    if cross == "information":
        return sandwich(H, corrected_scores(U, S2, S3, diag))
    if cross != "derivative":
        raise ValueError("cross must be 'information' or 'derivative'")
    n = panel.n

    def jac(get, put, dim):
        out = np.zeros((panel.p, dim))
        base = get(models)
        for k in range(dim):
            e = np.zeros(dim)
            e[k] = h
            up = equation(put(models, base + e)).evaluate(beta, alpha)[0].sum(axis=0)
            dn = equation(put(models, base - e)).evaluate(beta, alpha)[0].sum(axis=0)
            out[:, k] = (up - dn) / (2 * h)
        return out / n

    I12 = jac(lambda m: m.psi, lambda m, v: m.with_psi(v), S2.shape[1])
    I2 = -models.missingness_information(panel) / n
    I13 = I3 = None
    if S3.shape[1]:
        I13 = jac(lambda m: m.gamma, lambda m, v: m.with_gamma(v), S3.shape[1])
        I3 = -(S3.T @ S3) / n if models.covariate.kind != "binary" else -_logistic_info(panel, models) / n
    return sandwich(H, corrected_scores(U, S2, S3 if S3.shape[1] else None, diag, I12, I2, I13, I3))


def _logistic_info(panel, models):
    from scipy.special import expit

    from .missingness import subject_design

    W = subject_design(panel, models.covariate.names)
    pr = expit(W @ models.covariate.params) * panel.x_observed
    return W.T @ (W * (pr * (1 - pr))[:, None])
