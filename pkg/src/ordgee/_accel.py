"""Optional numba acceleration for the hot inner loops.

Set ``ORDGEE_NUMBA=0`` in the environment to force the pure-numpy code
paths (useful for debugging and for the benchmark in ``benchmarks/``).
The flag is read once at import time.
"""

from __future__ import annotations

import os

import numpy as np

_FLAG = os.environ.get("ORDGEE_NUMBA", "1").strip().lower()

try:
    import numba as _nb
except ImportError:  # pragma: no cover - numba is a declared dependency
    _nb = None

NUMBA_AVAILABLE = _nb is not None
USE_NUMBA = NUMBA_AVAILABLE and _FLAG not in ("0", "false", "no", "off")


def njit(*args, **kwargs):
    """``numba.njit`` when acceleration is enabled, identity otherwise."""
    if USE_NUMBA:
        return _nb.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]

    def identity(fn):
        return fn

    return identity


@njit(cache=True)
def _ipfp_loop(seed, row, col, tol, max_iter):
    B, J, _ = seed.shape
    out = seed.copy()
    iters = np.zeros(B, dtype=np.int64)
    resid = np.zeros(B)
    for b in range(B):
        tab = out[b]
        err = 1.0
        it = 0
        while it < max_iter:
            for j in range(J):
                s = 0.0
                for k in range(J):
                    s += tab[j, k]
                f = row[b, j] / s
                for k in range(J):
                    tab[j, k] *= f
            for k in range(J):
                s = 0.0
                for j in range(J):
                    s += tab[j, k]
                f = col[b, k] / s
                for j in range(J):
                    tab[j, k] *= f
            it += 1
            # columns are exact after the column pass; only rows can drift
            err = 0.0
            for j in range(J):
                s = 0.0
                for k in range(J):
                    s += tab[j, k]
                d = abs(s - row[b, j])
                if d > err:
                    err = d
            if err < tol:
                break
        iters[b] = it
        resid[b] = err
    return out, iters, resid


def _ipfp_numpy(seed, row, col, tol, max_iter):
    out = seed.copy()
    B = out.shape[0]
    iters = np.zeros(B, dtype=np.int64)
    resid = np.full(B, np.inf)
    active = np.ones(B, dtype=bool)
    it = 0
    while it < max_iter and active.any():
        idx = np.flatnonzero(active)
        tab = out[idx]
        tab *= (row[idx] / tab.sum(axis=2))[:, :, None]
        tab *= (col[idx] / tab.sum(axis=1))[:, None, :]
        out[idx] = tab
        it += 1
        err = np.abs(tab.sum(axis=2) - row[idx]).max(axis=1)
        resid[idx] = err
        iters[idx] = it
        active[idx[err < tol]] = False
    return out, iters, resid


def ipfp_batch(seed, row, col, tol=1e-10, max_iter=10_000):
    """Alternating row/column scaling of a batch of ``(B, J, J)`` tables."""
    seed = np.ascontiguousarray(seed, dtype=float)
    row = np.ascontiguousarray(row, dtype=float)
    col = np.ascontiguousarray(col, dtype=float)
    if USE_NUMBA:
        return _ipfp_loop(seed, row, col, float(tol), int(max_iter))
    return _ipfp_numpy(seed, row, col, tol, max_iter)


@njit(cache=True)
def _score_info_loop(D, W, r):
    n, K, p = D.shape
    Ui = np.zeros((n, p))
    H = np.zeros((p, p))
    DtW = np.zeros((p, K))
    for i in range(n):
        for a in range(p):
            for k in range(K):
                s = 0.0
                for m in range(K):
                    s += D[i, m, a] * W[i, m, k]
                DtW[a, k] = s
        for a in range(p):
            s = 0.0
            for k in range(K):
                s += DtW[a, k] * r[i, k]
            Ui[i, a] = s
            for b in range(p):
                s = 0.0
                for k in range(K):
                    s += DtW[a, k] * D[i, k, b]
                H[a, b] += s
    return Ui, H


def score_and_info(D, W, r):
    """Per-subject scores ``D_i' W_i r_i`` and the summed ``D_i' W_i D_i``.

    Parameters
    ----------
    D : ndarray, shape (n, K, p)
    W : ndarray, shape (n, K, K)
    r : ndarray, shape (n, K)
    """
    if USE_NUMBA:
        return _score_info_loop(
            np.ascontiguousarray(D, dtype=float),
            np.ascontiguousarray(W, dtype=float),
            np.ascontiguousarray(r, dtype=float),
        )
    return _score_info_numpy(D, W, r)


def _score_info_numpy(D, W, r):
    DtW = np.einsum("nkp,nkm->npm", D, W)
    Ui = np.einsum("npm,nm->np", DtW, r)
    H = np.einsum("npm,nmq->pq", DtW, D)
    return Ui, H
