"""Working association structures: correlations and local odds ratios.

Two parametrizations of the nuisance vector ``alpha`` are supported:

* ``corr`` -- Pearson-residual moment estimators of the blocks
  ``rho_tt' = Corr(Y_t, Y_t')`` (independent, exchangeable, one-dependent,
  banded, unstructured).
* ``lor``  -- marginalized local odds ratios from a row-column loglinear
  model fitted to the ``T(T-1)/2`` pairwise contingency tables (uniform,
  time-exchangeable, category-exchangeable, unstructured RC); joint
  probabilities follow by iterative proportional fitting.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _accel
from .exceptions import AssociationFitError, InsufficientDataError, IPFPError
from .panel import OrdinalPanel, occasion_cov_block

CORR_STRUCTURES = ("independent", "exchangeable", "one-dependent", "banded", "unstructured")
LOR_STRUCTURES = ("independent", "uniform", "time-exchangeable", "category-exchangeable", "rc-unstructured")

_ALIASES = {
    "corr": {
        "ind": "independent", "indep": "independent", "independence": "independent",
        "independent": "independent",
        "exch": "exchangeable", "exchangeable": "exchangeable",
        "1dep": "one-dependent", "one-dependent": "one-dependent", "1-dependent": "one-dependent",
        "band": "banded", "banded": "banded",
        "unst": "unstructured", "unstructured": "unstructured", "un": "unstructured",
    },
    "lor": {
        "ind": "independent", "indep": "independent", "independence": "independent",
        "independent": "independent",
        "unif": "uniform", "uniform": "uniform",
        "time": "time-exchangeable", "time.exch": "time-exchangeable",
        "time-exch": "time-exchangeable", "time-exchangeable": "time-exchangeable",
        "cat": "category-exchangeable", "cat.exch": "category-exchangeable",
        "cat-exch": "category-exchangeable", "category-exchangeable": "category-exchangeable",
        "rc": "rc-unstructured", "RC": "rc-unstructured", "rc-unstructured": "rc-unstructured",
        "unst": "rc-unstructured",
    },
}
_FAMILY_ALIASES = {"corr": "corr", "correlation": "corr", "lor": "lor", "local-odds": "lor", "or": "lor"}

_SHORT = {
    ("corr", "independent"): "ind", ("corr", "exchangeable"): "exch",
    ("corr", "one-dependent"): "1dep", ("corr", "banded"): "band",
    ("corr", "unstructured"): "unst", ("lor", "independent"): "ind",
    ("lor", "uniform"): "unif", ("lor", "time-exchangeable"): "time.exch",
    ("lor", "category-exchangeable"): "cat.exch", ("lor", "rc-unstructured"): "RC",
}

SHRINK_START = 1e-4
SHRINK_MAX = 0.5
PD_TOL = 1e-10


@dataclass(frozen=True)
class AssociationSpec:
    family: str
    structure: str

    def __post_init__(self):
        fam = _FAMILY_ALIASES.get(self.family)
        if fam is None:
            raise ValueError(f"unknown association family {self.family!r}")
        struct = _ALIASES[fam].get(self.structure, _ALIASES[fam].get(self.structure.lower()))
        if struct is None:
            raise ValueError(f"structure {self.structure!r} is not valid for family {fam!r}")
        object.__setattr__(self, "family", fam)
        object.__setattr__(self, "structure", struct)

    @classmethod
    def parse(cls, text: str) -> "AssociationSpec":
        """Parse ``family:structure``, e.g. ``corr:exch`` or ``lor:rc``."""
        if ":" not in text:
            raise ValueError(f"association spec must look like 'corr:exch', got {text!r}")
        fam, struct = text.split(":", 1)
        return cls(fam.strip(), struct.strip())

    @property
    def is_independence(self) -> bool:
        return self.structure == "independent"

    @property
    def label(self) -> str:
        return _SHORT[(self.family, self.structure)]

    def __str__(self) -> str:
        return f"{self.family}:{self.label}"


@dataclass
class AssociationEstimate:
    """Fitted working association.

    For the correlation family ``rho`` is a ``(T, T, J-1, J-1)`` array of
    correlation blocks (``rho[t, s] = rho[s, t].T``, zero diagonal). For the
    local-odds family ``log_theta`` is ``(L, J-1, J-1)`` in pair order
    ``(1,2), (1,3), ..., (T-1,T)``.
    """

    spec: AssociationSpec
    alpha: np.ndarray
    rho: Optional[np.ndarray] = None
    log_theta: Optional[np.ndarray] = None
    pairs: tuple = ()
    phi: Optional[np.ndarray] = None
    scores: Optional[np.ndarray] = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def theta(self) -> Optional[np.ndarray]:
        return None if self.log_theta is None else np.exp(self.log_theta)

    def to_dict(self) -> dict:
        out = {"family": self.spec.family, "structure": self.spec.structure,
               "alpha": np.asarray(self.alpha).tolist()}
        if self.phi is not None:
            out["phi"] = np.asarray(self.phi).tolist()
        if self.scores is not None:
            out["scores"] = np.asarray(self.scores).tolist()
        return out


def independence_estimate(spec: AssociationSpec, T: int, J: int) -> AssociationEstimate:
    if spec.family == "corr":
        return AssociationEstimate(spec, np.zeros(0), rho=np.zeros((T, T, J - 1, J - 1)))
    pairs = tuple(itertools.combinations(range(T), 2))
    return AssociationEstimate(spec, np.zeros(0), log_theta=np.zeros((len(pairs), J - 1, J - 1)),
                               pairs=pairs)


# ---------------------------------------------------------------------------
# correlation parametrization


def pearson_residuals(Y3, mu):
    """e_it = F_it^{-1/2} (Y_it - mu_it), batched over leading axes."""
    mu = np.asarray(mu, dtype=float)
    return (np.asarray(Y3, dtype=float) - mu) / np.sqrt(mu * (1.0 - mu))


def panel_pearson_residuals(panel: OrdinalPanel, beta):
    """Residuals for a panel; occasions lacking O or X are zero and masked.

    Returns ``(e, usable)`` with ``e`` of shape ``(n, T, J-1)``.
    """
    from .panel import indicators_3d, mean_model

    usable = panel.observed & panel.x_observed[:, None]
    x = np.nan_to_num(panel.x)
    mu, _ = mean_model(beta, x, panel.z, panel.J)
    e = pearson_residuals(indicators_3d(panel.y, panel.J), mu)
    return np.where(usable[:, :, None], e, 0.0), usable


def _pair_groups(T: int, structure: str):
    """Map each pair t<s to a parameter group index; -1 = fixed at zero."""
    groups = {}
    pairs = list(itertools.combinations(range(T), 2))
    if structure == "exchangeable":
        for pr in pairs:
            groups[pr] = 0
    elif structure == "banded":
        for t, s in pairs:
            groups[(t, s)] = s - t - 1
    elif structure == "one-dependent":
        for t, s in pairs:
            groups[(t, s)] = t if s == t + 1 else -1
    elif structure == "unstructured":
        for k, pr in enumerate(pairs):
            groups[pr] = k
    else:
        for pr in pairs:
            groups[pr] = -1
    n_groups = 1 + max(groups.values(), default=-1)
    return groups, n_groups


def pool_pair_moments(cross, counts, structure: str, p: int, dof_adjust: bool = True):
    """Pool per-subject pair cross-products into correlation blocks.

    Parameters
    ----------
    cross : (n, T, T, J-1, J-1)
        Contribution of subject i to pair (t, s), read for t < s only.
    counts : (n, T, T)
        Denominator contribution (1 per eligible pair).
    """
    n, T = cross.shape[:2]
    m = cross.shape[-1]
    groups, n_groups = _pair_groups(T, structure)
    num = np.zeros((n_groups, m, m))
    den = np.zeros(n_groups)
    tot = cross.sum(axis=0)
    cnt = counts.sum(axis=0)
    for (t, s), g in groups.items():
        if g < 0:
            continue
        num[g] += tot[t, s]
        den[g] += cnt[t, s]
    if n_groups and np.any(den <= 0):
        raise InsufficientDataError(f"no eligible pairs for {structure} correlation group")
    if dof_adjust:
        den = den - p
        if n_groups and np.any(den <= 0):
            raise InsufficientDataError("pair count does not exceed the number of regression parameters")
    blocks = num / den[:, None, None] if n_groups else num
    rho = np.zeros((T, T, m, m))
    for (t, s), g in groups.items():
        if g >= 0:
            rho[t, s] = blocks[g]
            rho[s, t] = blocks[g].T
    return rho, blocks.reshape(-1)


def _pair_outer(e, weight):
    # cross[i, t, s] = weight[i, t, s] * e[i, t] e[i, s]'
    return weight[:, :, :, None, None] * e[:, :, None, :, None] * e[:, None, :, None, :]


def estimate_correlation_moments(e, usable, structure: str, p: int, dof_adjust: bool = True,
                                 spec: Optional[AssociationSpec] = None) -> AssociationEstimate:
    """Moment estimator pooled over pairs with both occasions usable."""
    spec = spec or AssociationSpec("corr", structure)
    e = np.asarray(e, dtype=float)
    n, T, m = e.shape
    if structure == "independent":
        return independence_estimate(spec, T, m + 1)
    both = (usable[:, :, None] & usable[:, None, :]).astype(float)
    rho, alpha = pool_pair_moments(_pair_outer(e, both), both, structure, p, dof_adjust)
    return AssociationEstimate(spec, alpha, rho=rho)


def estimate_correlation_weighted(e, observed, pi_occ, pi_both, present, structure: str, p: int,
                                  dof_adjust: bool = True,
                                  spec: Optional[AssociationSpec] = None) -> AssociationEstimate:
    """Inverse-probability weighted moment estimator.

    Uses ``e*_t = e_t I(R_t = 3) / pi_t`` and pair factor
    ``pi_t pi_s / pi_ts`` where ``pi_ts`` is the probability that both
    occasions are fully observed. The denominator counts every scheduled
    pair (the Horvitz-Thompson target), so with no missingness the result
    equals :func:`estimate_correlation_moments`.
    """
    spec = spec or AssociationSpec("corr", structure)
    e = np.asarray(e, dtype=float)
    n, T, m = e.shape
    if structure == "independent":
        return independence_estimate(spec, T, m + 1)
    cross, counts = _weighted_cross(e, observed, pi_occ, pi_both, present)
    rho, alpha = pool_pair_moments(cross, counts, structure, p, dof_adjust)
    return AssociationEstimate(spec, alpha, rho=rho)


def _weighted_cross(e, observed, pi_occ, pi_both, present):
    obs = np.asarray(observed, dtype=bool)
    estar = np.where(obs[:, :, None], e / pi_occ[:, :, None], 0.0)
    factor = pi_occ[:, :, None] * pi_occ[:, None, :] / pi_both
    cross = _pair_outer(estar, factor)
    counts = (present[:, :, None] & present[:, None, :]).astype(float)
    return cross, counts


def estimate_correlation_dr(e, observed, pi_occ, pi_both, present, expected_cross, structure: str,
                            p: int, omega: float = 0.5, dof_adjust: bool = True,
                            spec: Optional[AssociationSpec] = None) -> AssociationEstimate:
    """Blend of the weighted estimator and the predictive-expectation estimator.

    ``expected_cross[i, t, s]`` is ``E[e_t e_s' | observed data]`` under the
    predictive model (equal to ``e_t e_s'`` when both are observed).
    """
    if not 0.0 <= omega <= 1.0:
        raise ValueError("omega must lie in [0, 1]")
    spec = spec or AssociationSpec("corr", structure)
    e = np.asarray(e, dtype=float)
    n, T, m = e.shape
    if structure == "independent":
        return independence_estimate(spec, T, m + 1)
    cross_w, counts = _weighted_cross(e, observed, pi_occ, pi_both, present)
    cross = omega * cross_w + (1.0 - omega) * counts[:, :, :, None, None] * expected_cross
    rho, alpha = pool_pair_moments(cross, counts, structure, p, dof_adjust)
    return AssociationEstimate(spec, alpha, rho=rho)


# ---------------------------------------------------------------------------
# local odds ratio parametrization


@dataclass(frozen=True)
class MarginalizedTables:
    pairs: tuple
    counts: np.ndarray  # (L, J, J)

    @property
    def L(self) -> int:
        return len(self.pairs)

    @property
    def J(self) -> int:
        return self.counts.shape[1]


def build_marginalized_tables(panel_or_y, J: Optional[int] = None) -> MarginalizedTables:
    """Pairwise-complete J x J tables F[t,j,s,j'] for every time pair t < s."""
    if isinstance(panel_or_y, OrdinalPanel):
        y, J = panel_or_y.y, panel_or_y.J
    else:
        y = np.asarray(panel_or_y)
        if J is None:
            raise ValueError("J is required with a raw response array")
    T = y.shape[1]
    pairs = tuple(itertools.combinations(range(T), 2))
    counts = np.zeros((len(pairs), J, J))
    for g, (t, s) in enumerate(pairs):
        ok = (y[:, t] > 0) & (y[:, s] > 0)
        np.add.at(counts[g], (y[ok, t] - 1, y[ok, s] - 1), 1.0)
    return MarginalizedTables(pairs, counts)


def _assoc_param_map(structure: str, L: int, J: int):
    """Return (n_params, unpack) with unpack(a) -> (phi (L,), nu (L, J), dphi, dnu).

    ``dphi[g]`` is (n_params,) and ``dnu[g]`` is (J, n_params).
    """
    base = np.arange(1, J + 1, dtype=float)
    n_free = J - 2

    if structure == "uniform":
        k = 1
    elif structure == "time-exchangeable":
        k = L
    elif structure == "category-exchangeable":
        k = 1 + n_free
    elif structure == "rc-unstructured":
        k = L * (1 + n_free)
    else:
        raise ValueError(structure)

    def unpack(a):
        phi = np.zeros(L)
        nu = np.tile(base, (L, 1))
        dphi = np.zeros((L, k))
        dnu = np.zeros((L, J, k))
        for g in range(L):
            if structure == "uniform":
                phi[g] = a[0]
                dphi[g, 0] = 1.0
            elif structure == "time-exchangeable":
                phi[g] = a[g]
                dphi[g, g] = 1.0
            elif structure == "category-exchangeable":
                phi[g] = a[0]
                dphi[g, 0] = 1.0
                nu[g, 1:J - 1] = a[1:]
                for c in range(n_free):
                    dnu[g, 1 + c, 1 + c] = 1.0
            else:
                off = g * (1 + n_free)
                phi[g] = a[off]
                dphi[g, off] = 1.0
                nu[g, 1:J - 1] = a[off + 1: off + 1 + n_free]
                for c in range(n_free):
                    dnu[g, 1 + c, off + 1 + c] = 1.0
        return phi, nu, dphi, dnu

    return k, unpack


def _rc_start(structure: str, L: int, J: int):
    k, _ = _assoc_param_map(structure, L, J)
    a = np.zeros(k)
    n_free = J - 2
    base = np.arange(2, J, dtype=float)
    if structure == "category-exchangeable":
        a[1:] = base
    elif structure == "rc-unstructured":
        for g in range(L):
            off = g * (1 + n_free)
            a[off + 1: off + 1 + n_free] = base
    return a


def fit_rc_loglinear(tables: MarginalizedTables, structure: str, continuity: float = 0.5,
                     max_iter: int = 200, tol: float = 1e-10,
                     spec: Optional[AssociationSpec] = None) -> AssociationEstimate:
    """Poisson ML fit of the row-column association model to all tables.

    Each table carries its own intercept and row/column main effects; the
    association term is ``phi_g * nu_gj * nu_gj'`` with identifiability
    constraints ``nu_1 = 1`` and ``nu_J = J``. Tables containing a zero cell
    receive a ``continuity`` correction in every cell. Empty tables are
    dropped from the fit (their association defaults to independence for
    pair-specific structures).
    """
    spec = spec or AssociationSpec("lor", structure)
    L, J = tables.L, tables.J
    if structure == "independent":
        return independence_estimate(spec, L and (tables.pairs[-1][1] + 1), J)
    counts = np.array(tables.counts, dtype=float)
    totals = counts.sum(axis=(1, 2))
    used = totals > 0
    if not used.any():
        raise InsufficientDataError("all marginalized tables are empty")
    corrected = []
    for g in range(L):
        if used[g] and np.any(counts[g] == 0):
            counts[g] += continuity
            corrected.append(g)
    k, unpack = _assoc_param_map(structure, L, J)
    uidx = np.flatnonzero(used)
    Lu = uidx.size
    F = counts[uidx].reshape(Lu, -1)
    jj, kk = np.meshgrid(np.arange(J), np.arange(J), indexing="ij")
    jj, kk = jj.ravel(), kk.ravel()
    # nuisance design per table: intercept, rows 2..J, cols 2..J
    Xn = np.zeros((J * J, 1 + 2 * (J - 1)))
    Xn[:, 0] = 1.0
    for c in range(1, J):
        Xn[jj == c, c] = 1.0
        Xn[kk == c, J - 1 + c] = 1.0
    nn = Xn.shape[1]
    n_par = Lu * nn + k

    def predictor(theta):
        a = theta[Lu * nn:]
        phi, nu, dphi, dnu = unpack(a)
        eta = np.empty((Lu, J * J))
        jac = np.zeros((Lu, J * J, n_par))
        for h, g in enumerate(uidx):
            lam = theta[h * nn:(h + 1) * nn]
            nj, nk = nu[g][jj], nu[g][kk]
            eta[h] = Xn @ lam + phi[g] * nj * nk
            jac[h, :, h * nn:(h + 1) * nn] = Xn
            jac[h, :, Lu * nn:] = (np.outer(nj * nk, dphi[g])
                                   + phi[g] * (nk[:, None] * dnu[g][jj] + nj[:, None] * dnu[g][kk]))
        return eta, jac

    theta = np.zeros(n_par)
    logF = np.log(F)
    for h in range(Lu):
        theta[h * nn:(h + 1) * nn] = np.linalg.lstsq(Xn, logF[h], rcond=None)[0]
    theta[Lu * nn:] = _rc_start(structure, L, J)
    # centre the main effects on the uniform-association starting point
    eta, _ = predictor(theta)
    for h in range(Lu):
        theta[h * nn:(h + 1) * nn] += np.linalg.lstsq(Xn, logF[h] - eta[h], rcond=None)[0]

    def loglik(eta):
        return float(np.sum(F * eta - np.exp(eta)))

    eta, jac = predictor(theta)
    ll = loglik(eta)
    trace = [ll]
    converged = False
    for it in range(max_iter):
        fit = np.exp(eta).reshape(-1)
        Jm = jac.reshape(-1, n_par)
        grad = Jm.T @ (F.reshape(-1) - fit)
        info = Jm.T @ (fit[:, None] * Jm)
        if np.max(np.abs(grad)) < tol * max(1.0, F.sum()):
            converged = True
            break
        ridge = 1e-10 * np.trace(info) / n_par
        step = np.linalg.lstsq(info + ridge * np.eye(n_par), grad, rcond=None)[0]
        lam = 1.0
        for _ in range(30):
            cand = theta + lam * step
            eta_c, jac_c = predictor(cand)
            ll_c = loglik(eta_c)
            if np.isfinite(ll_c) and ll_c >= ll - 1e-12 * abs(ll):
                break
            lam *= 0.5
        else:
            raise AssociationFitError(f"step halving failed in RC fit ({structure})", trace)
        theta, eta, jac = cand, eta_c, jac_c
        improvement = ll_c - ll
        ll = ll_c
        trace.append(ll)
        if abs(improvement) < tol * (1.0 + abs(ll)) and np.max(np.abs(lam * step)) < 1e-8:
            converged = True
            break
    if not converged:
        raise AssociationFitError(f"RC model ({structure}) did not converge in {max_iter} iterations", trace)
    a = theta[Lu * nn:]
    phi, nu, _, _ = unpack(a)
    dnu = np.diff(nu, axis=1)  # (L, J-1): nu_{j+1} - nu_j
    log_theta = phi[:, None, None] * dnu[:, :, None] * dnu[:, None, :]
    log_theta[~used] = 0.0
    diag = {"iterations": len(trace) - 1, "continuity_tables": corrected,
            "empty_tables": np.flatnonzero(~used).tolist(), "loglik": ll}
    return AssociationEstimate(spec, a, log_theta=log_theta, pairs=tables.pairs,
                               phi=phi, scores=nu, diagnostics=diag)


def local_odds_ratios(table) -> np.ndarray:
    """Adjacent-cell local odds ratios of a (..., J, J) table."""
    t = np.asarray(table, dtype=float)
    return (t[..., :-1, :-1] * t[..., 1:, 1:]) / (t[..., 1:, :-1] * t[..., :-1, 1:])


def odds_ratio_seed(theta) -> np.ndarray:
    """Table with unit first row/column whose local odds ratios equal theta."""
    lt = np.log(np.asarray(theta, dtype=float))
    J = lt.shape[-1] + 1
    seed = np.zeros(lt.shape[:-2] + (J, J))
    seed[..., 1:, 1:] = np.cumsum(np.cumsum(lt, axis=-2), axis=-1)
    return np.exp(seed)


def ipfp_joint_probabilities(row_probs, col_probs, theta, tol: float = 1e-10,
                             max_iter: int = 10_000) -> np.ndarray:
    """Joint J x J probabilities with given margins and local odds ratios.

    ``row_probs``/``col_probs`` are full J-category probability vectors
    (batched over leading axes); ``theta`` holds the (J-1) x (J-1) local
    odds ratios. Raises :class:`IPFPError` when the margin tolerance is not
    reached.
    """
    row = np.asarray(row_probs, dtype=float)
    col = np.asarray(col_probs, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if np.any(theta <= 0):
        raise ValueError("local odds ratios must be positive")
    lead = np.broadcast_shapes(row.shape[:-1], col.shape[:-1], theta.shape[:-2])
    J = row.shape[-1]
    row_b = np.broadcast_to(row, lead + (J,)).reshape(-1, J)
    col_b = np.broadcast_to(col, lead + (J,)).reshape(-1, J)
    seed = odds_ratio_seed(np.broadcast_to(theta, lead + theta.shape[-2:])).reshape(-1, J, J)
    seed = seed * row_b[:, :, None] * col_b[:, None, :]
    out, _, resid = _accel.ipfp_batch(seed, row_b, col_b, tol, max_iter)
    worst = float(np.max(resid)) if resid.size else 0.0
    if not worst < tol:
        raise IPFPError(f"IPFP did not converge (max margin residual {worst:.3g})", residual=worst)
    return out.reshape(lead + (J, J))


def _complete(mu):
    return np.concatenate([mu, 1.0 - mu.sum(axis=-1, keepdims=True)], axis=-1)


def assemble_working_covariance(mu, estimate: AssociationEstimate):
    """Working covariance V_i for every subject.

    Parameters
    ----------
    mu : (n, T, J-1) marginal probabilities

    Returns
    -------
    V : (n, T(J-1), T(J-1))
    """
    mu = np.asarray(mu, dtype=float)
    n, T, m = mu.shape
    K = T * m
    Vt = occasion_cov_block(mu)
    V = np.zeros((n, T, m, T, m))
    for t in range(T):
        V[:, t, :, t, :] = Vt[:, t]
    spec = estimate.spec
    if spec.is_independence:
        return V.reshape(n, K, K)
    if spec.family == "corr":
        sd = np.sqrt(mu * (1.0 - mu))
        for t in range(T):
            for s in range(T):
                if t != s:
                    V[:, t, :, s, :] = sd[:, t, :, None] * estimate.rho[t, s][None] * sd[:, s, None, :]
    else:
        full = _complete(mu)
        for g, (t, s) in enumerate(estimate.pairs):
            if not np.any(estimate.log_theta[g]):
                continue
            joint = ipfp_joint_probabilities(full[:, t], full[:, s], np.exp(estimate.log_theta[g]))
            blk = joint[:, :m, :m] - mu[:, t, :, None] * mu[:, s, None, :]
            V[:, t, :, s, :] = blk
            V[:, s, :, t, :] = np.swapaxes(blk, 1, 2)
    return V.reshape(n, K, K)


def shrink_to_pd(V, active=None):
    """Shrink the implied correlation of each V_i toward I until PD.

    ``C <- (1 - eps) C + eps I`` with eps doubling from 1e-4. Only rows in
    ``active`` (bool mask of length K per subject) are checked, so padded
    or unobserved slots do not trigger shrinkage.

    Returns
    -------
    V : shrunk matrices
    eps : (n,) shrinkage applied (0 when none was needed, inf when the
          limit of 0.5 was exceeded)
    """
    V = np.array(V, dtype=float)
    n, K, _ = V.shape
    if active is None:
        active = np.ones((n, K), dtype=bool)
    d = np.sqrt(np.clip(np.einsum("nkk->nk", V), 1e-300, None))
    C = V / d[:, :, None] / d[:, None, :]
    mm = active[:, :, None] & active[:, None, :]
    eye = np.eye(K)
    Cm = np.where(mm, C, eye)
    eps = np.zeros(n)
    bad = np.linalg.eigvalsh(Cm)[:, 0] <= PD_TOL
    e = SHRINK_START
    C0 = Cm.copy()
    while bad.any():
        if e > SHRINK_MAX:
            eps[bad] = np.inf
            break
        idx = np.flatnonzero(bad)
        Cm[idx] = (1.0 - e) * C0[idx] + e * eye
        eps[idx] = e
        still = np.linalg.eigvalsh(Cm[idx])[:, 0] <= PD_TOL
        bad[idx[~still]] = False
        e *= 2.0
    fixed = eps > 0
    if fixed.any():
        Cs = np.where(mm, Cm, C)
        V[fixed] = (Cs * d[:, :, None] * d[:, None, :])[fixed]
    return V, eps
