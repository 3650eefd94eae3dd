"""Missing-data machinery: R coding, nuisance models, weights, completions.

The observation process is split into a logistic model for observing the
baseline covariate (``R^x``) and a pooled logistic model for observing the
response at occasions ``t >= 2`` (``R^y_t``), whose predictors may only use
the observed history. Predictors are declared by name:

========== ============================================================
name        meaning
========== ============================================================
``o1``      baseline (first-occasion) response, numeric
``oprev``   previous response, numeric; 0 when it is missing
``oprev_cat`` dummies for the previous response (all zero if missing)
``rprev``   1 when the previous response was observed
``x``       baseline covariate
``zK``      K-th time-varying covariate (current occasion, or the
            first occasion for subject-level models)
========== ============================================================
"""

from __future__ import annotations

import itertools
import json
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from .exceptions import ImputationError, MalformedDataError, SeparationError
from .ordinal import LogisticFit, fit_cumulative_logit, fit_logistic, ordinal_probs
from .panel import MissingCode, OrdinalPanel


@dataclass
class ModelConfig:
    """Predictor lists and knobs for the nuisance models.

    The defaults reproduce the simulation design: ``R^x`` on the baseline
    response and first ``z``; ``R^y`` on the previous response (0 if
    missing), the previous observation indicator and the current ``z``.
    """

    missing_x: list = field(default_factory=lambda: ["o1", "z1"])
    missing_y: list = field(default_factory=lambda: ["oprev", "rprev", "z1"])
    covariate: list = field(default_factory=lambda: ["z1"])
    imputation: list = field(default_factory=lambda: ["x", "z1", "oprev_cat"])
    omega: float = 0.5
    mc_draws: int = 1000
    weight_floor: float = 0.01
    imputations: int = 10
    max_completions: int = 100_000
    fcs_cycles: int = 10

    def __post_init__(self):
        if not 0.0 <= self.omega <= 1.0:
            raise ValueError("omega must lie in [0, 1]")
        if not 0.0 < self.weight_floor < 1.0:
            raise ValueError("weight_floor must lie in (0, 1)")
        if self.imputations < 2:
            raise ValueError("at least 2 imputations are required")
        if self.mc_draws < 1:
            raise ValueError("mc_draws must be positive")

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown model-config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "ModelConfig":
        with Path(path).open() as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# coding and design matrices


def encode_missingness(panel: OrdinalPanel) -> np.ndarray:
    """R_it codes (0..3), -1 on absent occasions."""
    return panel.r_codes


def _z_index(name: str, q: int) -> int:
    try:
        k = int(name[1:])
    except ValueError:
        raise ValueError(f"unknown predictor {name!r}") from None
    if not 1 <= k <= q:
        raise ValueError(f"predictor {name!r} refers to a missing z column (q={q})")
    return k - 1


def _first_col(panel: OrdinalPanel) -> np.ndarray:
    return panel.present.argmax(axis=1)


def subject_design(panel: OrdinalPanel, names: Sequence[str], y=None, x=None) -> np.ndarray:
    """Intercept plus subject-level predictors (``o1``, ``zK`` at baseline, ``x``)."""
    y = panel.y if y is None else y
    x = panel.x if x is None else x
    rows = np.arange(panel.n)
    first = _first_col(panel)
    cols = [np.ones(panel.n)]
    for name in names:
        if name == "o1":
            o1 = y[rows, first].astype(float)
            if np.any(o1 <= 0):
                raise MalformedDataError("predictor 'o1' needs the baseline response for every subject")
            cols.append(o1)
        elif name == "x":
            cols.append(np.asarray(x, dtype=float))
        elif name.startswith("z"):
            cols.append(panel.z[rows, first, _z_index(name, panel.q)])
        else:
            raise ValueError(f"predictor {name!r} is not valid in a subject-level model")
    return np.column_stack(cols)


def occasion_design(names: Sequence[str], t: int, y, x, z, J: int, intercept: bool = True) -> np.ndarray:
    """Occasion-level predictors for column ``t`` (batched over leading axes of y)."""
    y = np.asarray(y)
    lead = y.shape[:-1]
    cols = [np.ones(lead)] if intercept else []
    prev = y[..., t - 1] if t > 0 else np.zeros(lead, dtype=np.int64)
    for name in names:
        if name == "oprev":
            if t > 0:
                cols.append(prev.astype(float))
        elif name == "oprev_cat":
            if t > 0:
                for c in range(1, J):
                    cols.append((prev == c).astype(float))
        elif name == "rprev":
            if t > 0:
                cols.append((prev > 0).astype(float))
        elif name == "x":
            cols.append(np.broadcast_to(np.asarray(x, dtype=float), lead))
        elif name.startswith("z"):
            k = _z_index(name, z.shape[-1])
            cols.append(np.broadcast_to(z[..., t, k], lead))
        else:
            raise ValueError(f"unknown occasion predictor {name!r}")
    if not cols:
        return np.zeros(lead + (0,))
    return np.stack(cols, axis=-1)


# ---------------------------------------------------------------------------
# fitted nuisance models

SEPARATION_PENALTY = 0.1


def _fit_robust(fitter, *args, log: Optional[list] = None, label: str = ""):
    """Unpenalized fit, falling back to a small ridge penalty on separation.

    Constant outcomes and empty categories are not rescued.
    """
    try:
        return fitter(*args)
    except SeparationError as exc:
        msg = str(exc)
        if "diverge" not in msg and "converge" not in msg and "halving" not in msg:
            raise
        if log is not None:
            log.append(label)
        return fitter(*args, penalty=SEPARATION_PENALTY)


@dataclass(frozen=True)
class CovariateModel:
    """Binary (logistic) or continuous (Gaussian linear) model for X."""

    kind: str  # "binary" | "gaussian"
    names: tuple
    fit: Optional[LogisticFit] = None
    coef: Optional[np.ndarray] = None
    sigma: float = 1.0

    @property
    def params(self) -> np.ndarray:
        return self.fit.coef if self.kind == "binary" else np.asarray(self.coef)

    def with_params(self, params) -> "CovariateModel":
        if self.kind == "binary":
            return replace(self, fit=LogisticFit(np.asarray(params, float), self.fit.cov,
                                                 self.fit.iterations, self.fit.grad_norm))
        return replace(self, coef=np.asarray(params, float))

    def prob_one(self, panel: OrdinalPanel) -> np.ndarray:
        return expit(subject_design(panel, self.names) @ self.params)

    def mean(self, panel: OrdinalPanel) -> np.ndarray:
        return subject_design(panel, self.names) @ self.params

    def scores(self, panel: OrdinalPanel) -> np.ndarray:
        """Complete-case likelihood score per subject (zero if X missing)."""
        W = subject_design(panel, self.names)
        xo = panel.x_observed
        x = np.nan_to_num(panel.x)
        if self.kind == "binary":
            resid = x - expit(W @ self.params)
        else:
            resid = (x - W @ self.params) / self.sigma ** 2
        return np.where(xo[:, None], W * resid[:, None], 0.0)


def fit_covariate_model(panel: OrdinalPanel, names: Sequence[str] = ("z1",),
                        log: Optional[list] = None) -> CovariateModel:
    """Complete-case fit of the model for X given declared predictors."""
    xo = panel.x_observed
    if not xo.any():
        raise SeparationError("no subject has X observed")
    W = subject_design(panel, names)[xo]
    x = panel.x[xo]
    if np.all(np.isin(x, (0.0, 1.0))):
        return CovariateModel("binary", tuple(names), fit=_fit_robust(fit_logistic, W, x, log=log,
                                                                      label="covariate"))
    coef, *_ = np.linalg.lstsq(W, x, rcond=None)
    dof = max(1, x.size - W.shape[1])
    sigma = float(np.sqrt(np.sum((x - W @ coef) ** 2) / dof))
    return CovariateModel("gaussian", tuple(names), coef=coef, sigma=max(sigma, 1e-8))


@dataclass(frozen=True)
class ImputationModel:
    """Per-occasion cumulative-logit models for O_t given x, z_t and history."""

    names: tuple
    fits: tuple  # OrdinalFit per column

    def log_probs(self, t: int, y, x, z, J: int) -> np.ndarray:
        """log Pr(O_t = c | ...) for c = 1..J, batched like ``y[..., :]``."""
        W = occasion_design(self.names, t, y, x, z, J, intercept=False)
        fit = self.fits[t]
        pr = ordinal_probs(fit.intercepts, fit.coef, W.reshape(-1, W.shape[-1]))
        return np.log(pr).reshape(W.shape[:-1] + (J,))


def fit_imputation_model(panel: OrdinalPanel, names: Sequence[str],
                         log: Optional[list] = None) -> ImputationModel:
    fits = []
    x = np.nan_to_num(panel.x)
    for t in range(panel.T):
        rows = panel.observed[:, t] & panel.x_observed
        if t > 0 and any(nm in ("oprev", "oprev_cat") for nm in names):
            rows &= panel.observed[:, t - 1]
        if rows.sum() < panel.J + 2:
            raise SeparationError(f"too few complete rows to fit the imputation model at occasion {t + 1}")
        W = occasion_design(names, t, panel.y[rows], x[rows], panel.z[rows], panel.J, intercept=False)
        fits.append(_fit_robust(fit_cumulative_logit, W, panel.y[rows, t], panel.J, log=log,
                                label=f"imputation[{t + 1}]"))
    return ImputationModel(tuple(names), tuple(fits))


@dataclass(frozen=True)
class MissingnessModels:
    """Fitted nuisance models; ``None`` marks a degenerate (never-missing) part."""

    config: ModelConfig
    missing_x: Optional[LogisticFit] = None
    missing_y: Optional[LogisticFit] = None
    first_y: Optional[float] = None  # Pr(first response observed) if it can be missing
    covariate: Optional[CovariateModel] = None
    imputation: Optional[ImputationModel] = None
    penalized: tuple = ()  # submodels refitted with a ridge penalty after separation

    @property
    def psi(self) -> np.ndarray:
        parts = [m.coef for m in (self.missing_x, self.missing_y) if m is not None]
        return np.concatenate(parts) if parts else np.zeros(0)

    def with_psi(self, psi) -> "MissingnessModels":
        psi = np.asarray(psi, dtype=float)
        out, k = {}, 0
        for name in ("missing_x", "missing_y"):
            m = getattr(self, name)
            if m is not None:
                d = m.coef.size
                out[name] = LogisticFit(psi[k:k + d], m.cov, m.iterations, m.grad_norm)
                k += d
        return replace(self, **out)

    @property
    def gamma(self) -> np.ndarray:
        return self.covariate.params if self.covariate is not None else np.zeros(0)

    def with_gamma(self, gamma) -> "MissingnessModels":
        if self.covariate is None:
            return self
        return replace(self, covariate=self.covariate.with_params(gamma))

    def missingness_scores(self, panel: OrdinalPanel) -> np.ndarray:
        """Per-subject score contributions S_2i for psi (n, dim psi)."""
        parts = []
        if self.missing_x is not None:
            W = subject_design(panel, self.config.missing_x)
            resid = panel.x_observed - expit(W @ self.missing_x.coef)
            parts.append(W * resid[:, None])
        if self.missing_y is not None:
            S = np.zeros((panel.n, self.missing_y.coef.size))
            x = np.nan_to_num(panel.x)
            for t in range(1, panel.T):
                W = occasion_design(self.config.missing_y, t, panel.y, x, panel.z, panel.J)
                resid = panel.observed[:, t] - expit(W @ self.missing_y.coef)
                S += np.where(panel.present[:, t, None], W * resid[:, None], 0.0)
            parts.append(S)
        return np.column_stack(parts) if parts else np.zeros((panel.n, 0))

    def missingness_information(self, panel: OrdinalPanel) -> np.ndarray:
        """Analytic -d S_2 / d psi' summed over subjects (block diagonal)."""
        blocks = []
        if self.missing_x is not None:
            W = subject_design(panel, self.config.missing_x)
            pr = expit(W @ self.missing_x.coef)
            blocks.append(W.T @ (W * (pr * (1 - pr))[:, None]))
        if self.missing_y is not None:
            d = self.missing_y.coef.size
            info = np.zeros((d, d))
            x = np.nan_to_num(panel.x)
            for t in range(1, panel.T):
                W = occasion_design(self.config.missing_y, t, panel.y, x, panel.z, panel.J)
                pr = expit(W @ self.missing_y.coef) * panel.present[:, t]
                info += W.T @ (W * (pr * (1 - pr))[:, None])
            blocks.append(info)
        if not blocks:
            return np.zeros((0, 0))
        dim = sum(b.shape[0] for b in blocks)
        out = np.zeros((dim, dim))
        k = 0
        for b in blocks:
            out[k:k + b.shape[0], k:k + b.shape[0]] = b
            k += b.shape[0]
        return out

    def covariate_scores(self, panel: OrdinalPanel) -> np.ndarray:
        if self.covariate is None:
            return np.zeros((panel.n, 0))
        return self.covariate.scores(panel)


def fit_missingness_models(panel: OrdinalPanel, config: Optional[ModelConfig] = None,
                           need_predictive: bool = True) -> MissingnessModels:
    """Fit the observation models and (optionally) the predictive models.

    Parts of the missing-data process that never vary in the data (e.g. X
    always observed) are left degenerate, so their scores do not enter the
    sandwich correction.
    """
    config = config or ModelConfig()
    x = np.nan_to_num(panel.x)
    mx = my = None
    first_y = None
    penalized: list = []
    if not panel.x_observed.all():
        mx = _fit_robust(fit_logistic, subject_design(panel, config.missing_x),
                         panel.x_observed.astype(float), log=penalized, label="missing_x")
    rows, outs = [], []
    for t in range(1, panel.T):
        pres = panel.present[:, t]
        W = occasion_design(config.missing_y, t, panel.y, x, panel.z, panel.J)
        rows.append(W[pres])
        outs.append(panel.observed[pres, t])
    if rows:
        R = np.concatenate(outs)
        if R.size and not R.all():
            my = _fit_robust(fit_logistic, np.concatenate(rows), R.astype(float), log=penalized,
                             label="missing_y")
    first = _first_col(panel)
    first_obs = panel.observed[np.arange(panel.n), first]
    if not first_obs.all():
        first_y = float(first_obs.mean())
    cov = imp = None
    any_missing = (mx is not None) or (my is not None) or (first_y is not None)
    if need_predictive and any_missing:
        if not panel.x_observed.all():
            cov = fit_covariate_model(panel, config.covariate, log=penalized)
        imp = fit_imputation_model(panel, config.imputation, log=penalized)
    return MissingnessModels(config, mx, my, first_y, cov, imp, tuple(penalized))


# ---------------------------------------------------------------------------
# observation probabilities and weight matrices


@dataclass(frozen=True)
class ObservationProbs:
    """Observation probabilities for every subject-occasion.

    ``pi_occ[i, t]`` = Pr(R_it = 3); ``pi_pair[i, t, s]`` = Pr(R_it in {1,3},
    R_is = 3) (X observed and O_s observed; column-indexed by ``s``);
    ``pi_both[i, t, s]`` = Pr(R_it = 3, R_is = 3).
    """

    pi_x: np.ndarray
    py: np.ndarray
    pi_occ: np.ndarray
    pi_pair: np.ndarray
    pi_both: np.ndarray
    truncated: int = 0


def _rx_prob(models: MissingnessModels, panel: OrdinalPanel) -> np.ndarray:
    if models.missing_x is None:
        return np.ones(panel.n)
    return expit(subject_design(panel, models.config.missing_x) @ models.missing_x.coef)


def _ry_step(models: MissingnessModels, panel: OrdinalPanel, t: int, y) -> np.ndarray:
    if models.missing_y is None:
        return np.ones(y.shape[:-1])
    x = np.nan_to_num(panel.x)
    W = occasion_design(models.config.missing_y, t, y, x, panel.z, panel.J)
    return expit(W @ models.missing_y.coef)


def observation_probs(models: MissingnessModels, panel: OrdinalPanel, kind: str = "sequential",
                      full_y=None, floor: Optional[float] = None) -> ObservationProbs:
    """Observation probabilities under the fitted models.

    ``kind="sequential"`` (default) uses, for occasion t, the product of the
    X-observation probability and the one-step probability of observing
    O_t given the realised observed history; this is computable from the
    observed data and gives weights with conditional mean one.

    ``kind="marginal"`` sums over all response-observation histories given
    the full response vector (``full_y``, defaulting to the panel's own
    responses, which must then be observed wherever a history needs them).
    """
    floor = models.config.weight_floor if floor is None else floor
    n, T = panel.n, panel.T
    px = _rx_prob(models, panel)
    p_first = 1.0 if models.first_y is None else models.first_y
    if kind == "sequential":
        py = np.ones((n, T))
        py[:, 0] = p_first
        for t in range(1, T):
            py[:, t] = _ry_step(models, panel, t, panel.y)
        both = py[:, :, None] * py[:, None, :]
        idx = np.arange(T)
        both[:, idx, idx] = py
    elif kind == "marginal":
        py, both = _marginal_response_probs(models, panel, full_y, p_first)
    else:
        raise ValueError(f"unknown probability kind {kind!r}")
    py = np.where(panel.present, py, 1.0)
    pi_occ = px[:, None] * py
    pi_pair = np.broadcast_to(pi_occ[:, None, :], (n, T, T)).copy()
    pi_both = px[:, None, None] * both
    used = panel.present[:, :, None] & panel.present[:, None, :]
    low = int(np.sum(pi_occ[panel.present] < floor) + np.sum(pi_both[used] < floor))
    if low:
        warnings.warn(f"{low} observation probabilities truncated at {floor}", RuntimeWarning,
                      stacklevel=2)
    return ObservationProbs(px, py, np.maximum(pi_occ, floor), np.maximum(pi_pair, floor),
                            np.maximum(pi_both, floor), low)


def _marginal_response_probs(models, panel, full_y, p_first):
    n, T = panel.n, panel.T
    full_y = panel.y if full_y is None else np.asarray(full_y)
    py = np.zeros((n, T))
    both = np.zeros((n, T, T))
    first_var = models.first_y is not None
    for hist in itertools.product((0, 1), repeat=T):
        if hist[0] == 0 and not first_var:
            continue
        prob = np.full(n, p_first if hist[0] else 1.0 - p_first)
        ystar = np.where(np.array(hist)[None, :] == 1, full_y, 0)
        need = (np.array(hist)[None, :] == 1) & (full_y <= 0) & panel.present
        for t in range(1, T):
            if need[:, t - 1].any():
                raise MalformedDataError("marginal probabilities need the full response history")
            p = _ry_step(models, panel, t, ystar)
            prob = prob * np.where(panel.present[:, t], p if hist[t] else 1.0 - p, 1.0 if hist[t] else 0.0)
        h = np.array(hist, dtype=float)
        py += prob[:, None] * h[None, :]
        both += prob[:, None, None] * (h[:, None] * h[None, :])[None]
    return py, both


def build_weight_matrix(r_codes, probs: ObservationProbs, J: int) -> np.ndarray:
    """Delta_i: block (t, s) holds delta_ts replicated over (J-1)^2 entries.

    ``delta_tt = I(R_t = 3) / pi_t`` and, for t != s,
    ``delta_ts = {I(R_t = 1, R_s = 3) + I(R_t = 3, R_s = 3)} / pi_ts``. The
    row index multiplies the mean derivative and the column index the
    residual, so the matrix is not symmetric in general.
    """
    r = np.asarray(r_codes)
    n, T = r.shape
    row_ok = (r == MissingCode.RESPONSE_MISSING) | (r == MissingCode.OBSERVED)
    col_ok = r == MissingCode.OBSERVED
    num = (row_ok[:, :, None] & col_ok[:, None, :]).astype(float)
    delta = num / probs.pi_pair
    idx = np.arange(T)
    delta[:, idx, idx] = col_ok / probs.pi_occ
    m = J - 1
    return np.repeat(np.repeat(delta, m, axis=1), m, axis=2)


# ---------------------------------------------------------------------------
# predictive completions for the augmentation term


@dataclass(frozen=True)
class Completions:
    """Weighted completions (x, y^m) of every subject's missing data.

    Rows are grouped by subject; ``weight`` sums to one within a subject.
    """

    subject: np.ndarray
    x: np.ndarray
    y: np.ndarray
    weight: np.ndarray
    monte_carlo: tuple = ()

    def __len__(self):
        return self.subject.size


def _x_support(models, panel, idx, rng):
    """Candidate x values and log prior weights for subjects ``idx``."""
    cov = models.covariate
    if cov is None:
        raise ImputationError("X is missing but no covariate model was fitted")
    sub = panel.subset(idx)
    if cov.kind == "binary":
        p1 = np.clip(cov.prob_one(sub), 1e-300, 1.0)
        p0 = np.clip(1.0 - cov.prob_one(sub), 1e-300, 1.0)
        xs = np.tile([0.0, 1.0], (idx.size, 1))
        return xs, np.log(np.column_stack([p0, p1]))
    M = models.config.mc_draws
    if rng is None:
        raise ImputationError("continuous X requires an rng for Monte Carlo draws")
    xs = cov.mean(sub)[:, None] + cov.sigma * rng.standard_normal((idx.size, M))
    return xs, np.full((idx.size, M), -np.log(M))


def _completion_loglik(models, panel, idx, ycomp, xcomp):
    """Sum over occasions of log Pr(O_t = y_t | x, z_t, y_{t-1}) (imputation model)."""
    imp = models.imputation
    shape = ycomp.shape[:-1]
    ll = np.zeros(shape)
    z = panel.z[idx].reshape((idx.size,) + (1,) * (len(shape) - 1) + panel.z.shape[1:])
    present = panel.present[idx].reshape((idx.size,) + (1,) * (len(shape) - 1) + (panel.T,))
    for t in range(panel.T):
        lp = imp.log_probs(t, ycomp, xcomp, z, panel.J)
        yt = np.clip(ycomp[..., t], 1, panel.J) - 1
        val = np.take_along_axis(lp, yt[..., None], axis=-1)[..., 0]
        ll += np.where(present[..., t] & (ycomp[..., t] > 0), val, 0.0)
    return ll


def predictive_weights(panel: OrdinalPanel, models: MissingnessModels, rng=None) -> Completions:
    """Enumerate (or sample) completions of the missing (y^m, x^m).

    Weights are proportional to ``Pr(x | covariate model) x prod_t
    Pr(O_t | x, z_t, O_{t-1}; imputation model)``, normalised within
    subject, which is the conditional law of the missing parts given the
    observed ones. Binary X is enumerated; continuous X uses ``mc_draws``
    draws from the covariate model. Patterns whose completion count exceeds
    ``max_completions`` switch to Monte Carlo draws from the sequential
    model, importance-weighted by the likelihood of the observed responses.
    """
    n, T, J = panel.n, panel.T, panel.J
    miss_y = panel.present & ~panel.observed
    miss_x = ~panel.x_observed
    keys = {}
    for i in range(n):
        keys.setdefault((bool(miss_x[i]), tuple(miss_y[i])), []).append(i)
    subj, xs_out, ys_out, ws_out, mc = [], [], [], [], []
    cap = models.config.max_completions
    for (xm, ymask), members in keys.items():
        idx = np.array(members)
        ng = idx.size
        mcols = np.flatnonzero(ymask)
        if not xm and mcols.size == 0:
            subj.append(idx)
            xs_out.append(panel.x[idx])
            ys_out.append(panel.y[idx])
            ws_out.append(np.ones(ng))
            continue
        if models.imputation is None:
            raise ImputationError("missing responses or X but no imputation model was fitted")
        if xm:
            xs, lpx = _x_support(models, panel, idx, rng)
        else:
            xs, lpx = panel.x[idx][:, None], np.zeros((ng, 1))
        nx = xs.shape[1]
        ncomb = J ** mcols.size
        if nx * ncomb > cap:
            ycomp, xcomp, logw = _mc_completions(models, panel, idx, xs, lpx, rng)
            mc.extend(idx.tolist())
        else:
            combos = np.array(list(itertools.product(range(1, J + 1), repeat=mcols.size)),
                              dtype=np.int64).reshape(ncomb, mcols.size)
            ycomp = np.broadcast_to(panel.y[idx][:, None, None, :], (ng, nx, ncomb, T)).copy()
            ycomp[:, :, :, mcols] = combos[None, None]
            xcomp = np.broadcast_to(xs[:, :, None], (ng, nx, ncomb))
            logw = lpx[:, :, None] + _completion_loglik(models, panel, idx, ycomp, xcomp)
            ycomp = ycomp.reshape(ng, nx * ncomb, T)
            xcomp = xcomp.reshape(ng, nx * ncomb)
            logw = logw.reshape(ng, nx * ncomb)
        logw = logw - logw.max(axis=1, keepdims=True)
        w = np.exp(logw)
        w /= w.sum(axis=1, keepdims=True)
        ncomp = w.shape[1]
        subj.append(np.repeat(idx, ncomp))
        xs_out.append(xcomp.reshape(-1))
        ys_out.append(ycomp.reshape(-1, T))
        ws_out.append(w.reshape(-1))
    subject = np.concatenate(subj)
    order = np.argsort(subject, kind="stable")
    return Completions(subject[order], np.concatenate(xs_out)[order],
                       np.concatenate(ys_out)[order], np.concatenate(ws_out)[order], tuple(sorted(mc)))


@dataclass(frozen=True)
class FilteredCompletions:
    """Completions conditioning each occasion on the history its weight uses.

    ``columns[s]`` holds completions of ``(x, O_s)`` given the baseline
    data, ``O_1``, the responses observed before occasion ``s`` and the
    observed X, but not ``O_s`` itself or later responses (``O_1`` stays
    observed at ``s = 0``). Those histories are exactly what the response
    observation probabilities depend on.

    ``posterior`` holds completions given all observed data with X masked
    for every subject; its ``(subject, x)`` support points carry the
    posterior law of X. ``given_x[s]`` completes ``O_s`` from the same
    history as ``columns[s]`` with X fixed at each support point. Both are
    ``None`` when X is never missing.
    """

    columns: tuple
    posterior: Optional[Completions] = None
    given_x: Optional[tuple] = None

    def _parts(self) -> tuple:
        extra = () if self.posterior is None else (self.posterior,) + self.given_x
        return self.columns + extra

    @property
    def monte_carlo(self) -> tuple:
        return tuple(sorted(set().union(*(c.monte_carlo for c in self._parts()))))

    def __len__(self):
        return sum(len(c) for c in self._parts())


def _history_panel(panel: OrdinalPanel, s: int):
    """Occasions ``0..s`` of the subjects present at ``s`` with ``O_s`` masked."""
    idx = np.flatnonzero(panel.present[:, s])
    y = panel.y[idx, : s + 1].copy()
    if s > 0:
        y[:, s] = 0
    sub = OrdinalPanel(y=y, present=panel.present[idx, : s + 1], x=panel.x[idx],
                       z=panel.z[idx, : s + 1], J=panel.J, z_names=panel.z_names)
    return idx, sub


def _history_completions(panel, models, rng, owner=None):
    """``columns``-style completions of every occasion; ``owner`` maps rows to subjects."""
    owner = np.arange(panel.n) if owner is None else owner
    cols = []
    for s in range(panel.T):
        idx, sub = _history_panel(panel, s)
        c = predictive_weights(sub, models, rng=rng)
        rows = owner[idx[c.subject]]
        cols.append(Completions(rows, c.x, c.y, c.weight, tuple(sorted({int(owner[idx[i]]) for i in c.monte_carlo}))))
    return tuple(cols)


def x_support(completions: Completions):
    """Unique ``(subject, x)`` support points and their summed weights."""
    key = np.stack([completions.subject.astype(float), completions.x], axis=1)
    uniq, inv = np.unique(key, axis=0, return_inverse=True)
    prob = np.zeros(len(uniq))
    np.add.at(prob, inv.reshape(-1), completions.weight)
    return uniq[:, 0].astype(np.int64), uniq[:, 1], prob


def filtered_weights(panel: OrdinalPanel, models: MissingnessModels, rng=None) -> FilteredCompletions:
    """Per-occasion predictive completions given the observed history.

    When nothing is missing (no predictive models were needed) every
    occasion's completion is the observed data itself.
    """
    if models.imputation is None:
        full = predictive_weights(panel, models, rng=rng)
        return FilteredCompletions((full,) * panel.T)
    columns = _history_completions(panel, models, rng)
    if models.covariate is None:
        return FilteredCompletions(columns)
    posterior = predictive_weights(panel.replace(x=np.full(panel.n, np.nan)), models, rng=rng)
    subj, xs, _ = x_support(posterior)
    expanded = panel.subset(subj).replace(x=xs)
    return FilteredCompletions(columns, posterior, _history_completions(expanded, models, rng, owner=subj))


def _mc_completions(models, panel, idx, xs, lpx, rng):
    if rng is None:
        raise ImputationError("Monte Carlo completions require an rng")
    M = models.config.mc_draws
    ng, T, J = idx.size, panel.T, panel.J
    # x draws from the prior (support points resampled by prior weight)
    pri = np.exp(lpx - lpx.max(axis=1, keepdims=True))
    pri /= pri.sum(axis=1, keepdims=True)
    pick = np.array([rng.choice(xs.shape[1], size=M, p=pri[g]) for g in range(ng)])
    xcomp = np.take_along_axis(xs, pick, axis=1)
    ycomp = np.broadcast_to(panel.y[idx][:, None, :], (ng, M, T)).copy()
    z = panel.z[idx][:, None]
    logw = np.zeros((ng, M))
    for t in range(T):
        lp = models.imputation.log_probs(t, ycomp, xcomp, z, J)
        pres = panel.present[idx, t][:, None]
        obs = ycomp[:, :, t] > 0
        draw_here = pres & ~obs
        u = rng.random((ng, M))
        cdf = np.cumsum(np.exp(lp), axis=-1)
        draws = 1 + (u[..., None] > cdf[..., :-1]).sum(axis=-1)
        ycomp[:, :, t] = np.where(draw_here, draws, ycomp[:, :, t])
        yt = np.clip(ycomp[:, :, t], 1, J) - 1
        val = np.take_along_axis(lp, yt[..., None], axis=-1)[..., 0]
        logw += np.where(pres & obs, val, 0.0)
    return ycomp, xcomp, logw


# ---------------------------------------------------------------------------
# chained-equation multiple imputation


def fcs_impute(panel: OrdinalPanel, M: int, rng, config: Optional[ModelConfig] = None,
               cycles: Optional[int] = None) -> list:
    """Multiple imputation by chained equations.

    Each incomplete occasion is imputed from a cumulative-logit model on
    ``x``, ``z_t`` and the other occasions' responses; a missing binary X
    from a logistic model on the declared covariate predictors plus all
    responses. Parameters are drawn from their normal approximation before
    each imputation step. Observed cells are never modified.
    """
    config = config or ModelConfig()
    if M < 2:
        raise ValueError("M must be at least 2")
    cycles = config.fcs_cycles if cycles is None else cycles
    streams = rng.spawn(M) if hasattr(rng, "spawn") else [np.random.default_rng(rng.integers(2**63))
                                                          for _ in range(M)]
    return [_fcs_single(panel, s, config, cycles) for s in streams]


def _fcs_single(panel: OrdinalPanel, rng, config: ModelConfig, cycles: int) -> OrdinalPanel:
    T, J = panel.T, panel.J
    miss_y = panel.present & ~panel.observed
    miss_x = ~panel.x_observed
    if not miss_y.any() and not miss_x.any():
        return panel
    y = panel.y.copy()
    x = panel.x.copy()
    for t in range(T):
        obs_vals = panel.y[panel.observed[:, t], t]
        if miss_y[:, t].any():
            if obs_vals.size == 0:
                raise ImputationError(f"occasion {t + 1} has no observed responses")
            y[miss_y[:, t], t] = rng.choice(obs_vals, size=int(miss_y[:, t].sum()))
    binary_x = np.all(np.isin(panel.x[panel.x_observed], (0.0, 1.0)))
    if miss_x.any():
        obs_x = panel.x[panel.x_observed]
        if obs_x.size == 0:
            raise ImputationError("X is never observed")
        x[miss_x] = rng.choice(obs_x, size=int(miss_x.sum()))
    # a constant observed X is a degenerate model: every draw repeats it
    x_constant = miss_x.any() and np.unique(panel.x[panel.x_observed]).size == 1
    cov_base = subject_design(panel, [nm for nm in config.covariate if nm != "o1"])
    z_names = [nm for nm in config.imputation if nm.startswith("z")]
    for _ in range(cycles):
        for t in np.flatnonzero(miss_y.any(axis=0)):
            others = [s for s in range(T) if s != t]
            cols = [x[:, None]]
            for nm in z_names:
                cols.append(panel.z[:, t, _z_index(nm, panel.q)][:, None])
            cols.append(np.where(panel.present[:, others], y[:, others], 0).astype(float))
            W = np.column_stack(cols)
            fit_rows = panel.observed[:, t]
            try:
                fit = _fit_robust(fit_cumulative_logit, W[fit_rows], y[fit_rows, t], J).draw(rng)
            except (SeparationError, np.linalg.LinAlgError) as exc:
                raise ImputationError(f"imputation model for occasion {t + 1} failed: {exc}") from exc
            rows = miss_y[:, t]
            pr = fit.category_probs(W[rows])
            cdf = np.cumsum(pr, axis=1)
            u = rng.random(rows.sum())
            y[rows, t] = 1 + (u[:, None] > cdf[:, :-1]).sum(axis=1)
        if miss_x.any() and not x_constant:
            W = np.column_stack([cov_base, np.where(panel.present, y, 0).astype(float)])
            fit_rows = panel.x_observed
            rows = miss_x
            try:
                if binary_x:
                    lf = _fit_robust(fit_logistic, W[fit_rows], x[fit_rows])
                    coef = rng.multivariate_normal(lf.coef, lf.cov, method="cholesky")
                    x[rows] = (rng.random(rows.sum()) < expit(W[rows] @ coef)).astype(float)
                else:
                    coef, *_ = np.linalg.lstsq(W[fit_rows], x[fit_rows], rcond=None)
                    res = x[fit_rows] - W[fit_rows] @ coef
                    sd = np.sqrt(res @ res / max(1, res.size - W.shape[1]))
                    x[rows] = W[rows] @ coef + sd * rng.standard_normal(rows.sum())
            except (SeparationError, np.linalg.LinAlgError) as exc:
                raise ImputationError(f"covariate imputation model failed: {exc}") from exc
    return panel.replace(y=np.where(panel.present, y, 0), x=x)
