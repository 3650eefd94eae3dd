"""Maximum-likelihood fits of small logistic and cumulative-logit models.

These back the missing-data, covariate and imputation submodels. Both use
Fisher scoring with step halving.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .exceptions import SeparationError

COEF_LIMIT = 25.0


@dataclass(frozen=True)
class LogisticFit:
    coef: np.ndarray
    cov: np.ndarray
    iterations: int
    grad_norm: float

    def predict(self, X) -> np.ndarray:
        return expit(np.asarray(X, dtype=float) @ self.coef)


def fit_logistic(X, y, max_iter: int = 100, tol: float = 1e-8, penalty: float = 0.0) -> LogisticFit:
    """Logistic regression by Newton-Raphson.

    ``penalty`` adds ``-penalty/2 * |b|^2`` on all but the first (intercept)
    coefficient, which keeps estimates finite under separation.

    Raises
    ------
    SeparationError
        When the outcome is constant or (unpenalized) the coefficients diverge.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if y.size == 0:
        raise SeparationError("no rows to fit")
    if np.all(y == y[0]):
        raise SeparationError(f"outcome is constant ({y[0]:g}); logistic fit is separated")
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise SeparationError("design matrix is rank deficient")
    m = y.mean()
    b = np.zeros(X.shape[1])
    b[0] = np.log(m / (1 - m)) if np.allclose(X[:, 0], 1.0) else 0.0
    pen = np.full(X.shape[1], float(penalty))
    pen[0] = 0.0

    def loglik(beta):
        eta = X @ beta
        return float(np.sum(y * eta - np.logaddexp(0.0, eta)) - 0.5 * np.sum(pen * beta ** 2))

    ll = loglik(b)
    for it in range(1, max_iter + 1):
        pr = expit(X @ b)
        grad = X.T @ (y - pr) - pen * b
        gnorm = float(np.max(np.abs(grad)))
        if gnorm < tol:
            break
        info = X.T @ (X * (pr * (1 - pr))[:, None]) + np.diag(pen)
        step = np.linalg.solve(info, grad)
        lam = 1.0
        for _ in range(40):
            cand = b + lam * step
            ll_c = loglik(cand)
            if ll_c >= ll - 1e-12:
                break
            lam *= 0.5
        b, ll = cand, ll_c
        if not penalty and np.max(np.abs(b)) > COEF_LIMIT:
            raise SeparationError("logistic coefficients diverge (quasi-complete separation)")
    else:
        raise SeparationError(f"logistic fit did not converge (|grad|={gnorm:.2e})")
    pr = expit(X @ b)
    info = X.T @ (X * (pr * (1 - pr))[:, None]) + np.diag(pen)
    return LogisticFit(b, np.linalg.inv(info), it, gnorm)


@dataclass(frozen=True)
class OrdinalFit:
    """logit Pr(O <= j | w) = intercepts[j] + w' coef."""

    intercepts: np.ndarray
    coef: np.ndarray
    cov: np.ndarray
    iterations: int

    @property
    def params(self) -> np.ndarray:
        return np.concatenate([self.intercepts, self.coef])

    def category_probs(self, W) -> np.ndarray:
        return ordinal_probs(self.intercepts, self.coef, W)

    def draw(self, rng) -> "OrdinalFit":
        """Parameter draw from the normal approximation (intercepts sorted)."""
        par = rng.multivariate_normal(self.params, self.cov, method="cholesky")
        k = self.intercepts.size
        return OrdinalFit(np.sort(par[:k]), par[k:], self.cov, self.iterations)


def ordinal_probs(intercepts, coef, W) -> np.ndarray:
    W = np.asarray(W, dtype=float)
    eta = W @ np.asarray(coef, dtype=float) if np.size(coef) else np.zeros(W.shape[:-1])
    cum = expit(np.asarray(intercepts)[None, :] + eta.reshape(-1)[:, None])
    cum = np.concatenate([np.zeros((cum.shape[0], 1)), cum, np.ones((cum.shape[0], 1))], axis=1)
    pr = np.clip(np.diff(cum, axis=1), 1e-300, None)
    return pr.reshape(W.shape[:-1] + (pr.shape[-1],))


def _prob_gradients(f, W, J: int, npar: int) -> np.ndarray:
    """G[n, c, :] = d Pr(O = c+1) / d (intercepts, coef)."""
    N, k = W.shape
    G = np.zeros((N, J, npar))
    for c in range(J):
        if c < J - 1:
            G[:, c, c] += f[:, c + 1]
        if c > 0:
            G[:, c, c - 1] -= f[:, c]
        if k:
            G[:, c, J - 1:] = (f[:, c + 1] - f[:, c])[:, None] * W
    return G


def fit_cumulative_logit(W, y, J: int, max_iter: int = 100, tol: float = 1e-8,
                         penalty: float = 0.0) -> OrdinalFit:
    """Proportional-odds ML fit of categories ``y`` in ``1..J`` on ``W``.

    ``W`` must not contain an intercept column. ``penalty`` is a ridge
    penalty on the slopes (intercepts are never penalized).
    """
    W = np.asarray(W, dtype=float)
    if W.ndim == 1:
        W = W[:, None]
    y = np.asarray(y, dtype=np.int64)
    N, k = W.shape
    counts = np.bincount(y - 1, minlength=J)
    if np.any(counts == 0):
        raise SeparationError(f"category counts {counts.tolist()} contain an empty level")
    if k and np.linalg.matrix_rank(np.column_stack([np.ones(N), W])) < k + 1:
        raise SeparationError("ordinal design matrix is rank deficient")
    cumfreq = np.cumsum(counts)[:-1] / N
    a = np.log(cumfreq / (1 - cumfreq))
    b = np.zeros(k)
    npar = J - 1 + k
    rows = np.arange(N)
    pen = np.concatenate([np.zeros(J - 1), np.full(k, float(penalty))])

    def parts(a, b):
        eta = W @ b if k else np.zeros(N)
        F = expit(a[None, :] + eta[:, None])
        Fb = np.concatenate([np.zeros((N, 1)), F, np.ones((N, 1))], axis=1)
        return Fb * (1 - Fb), np.clip(np.diff(Fb, axis=1), 1e-300, None)

    def loglik(a, b):
        eta = W @ b if k else np.zeros(N)
        F = expit(a[None, :] + eta[:, None])
        Fb = np.concatenate([np.zeros((N, 1)), F, np.ones((N, 1))], axis=1)
        pr = np.diff(Fb, axis=1)[rows, y - 1]
        if np.any(pr <= 0):
            return -np.inf
        return float(np.sum(np.log(pr)) - 0.5 * np.sum(pen[J - 1:] * b ** 2))

    ll = loglik(a, b)
    for it in range(1, max_iter + 1):
        f, P = parts(a, b)
        G = _prob_gradients(f, W, J, npar)
        g_obs = G[rows, y - 1] / P[rows, y - 1][:, None]
        grad = g_obs.sum(axis=0) - pen * np.concatenate([a, b])
        gnorm = float(np.max(np.abs(grad)))
        if gnorm < tol:
            break
        info = np.einsum("ncp,ncq->pq", G / P[:, :, None], G) + np.diag(pen)
        step = np.linalg.solve(info, grad)
        lam = 1.0
        for _ in range(40):
            a_c = a + lam * step[: J - 1]
            b_c = b + lam * step[J - 1:]
            if np.all(np.diff(a_c) > 0):
                ll_c = loglik(a_c, b_c)
                if ll_c >= ll - 1e-12:
                    break
            lam *= 0.5
        else:
            raise SeparationError("ordinal fit: step halving failed")
        a, b, ll = a_c, b_c, ll_c
        if not penalty and np.max(np.abs(np.concatenate([a, b]))) > COEF_LIMIT:
            raise SeparationError("ordinal coefficients diverge")
    else:
        raise SeparationError(f"ordinal fit did not converge (|grad|={gnorm:.2e})")
    f, P = parts(a, b)
    G = _prob_gradients(f, W, J, npar)
    info = np.einsum("ncp,ncq->pq", G / P[:, :, None], G) + np.diag(pen)
    return OrdinalFit(a, b, np.linalg.inv(info), it)
