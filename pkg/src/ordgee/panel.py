"""Longitudinal ordinal panels and the cumulative-logit marginal mean model.

Responses are coded ``1..J``; internally a subject's response history is
held in padded ``(n, T)`` arrays with ``0`` marking a missing response.
The (J-1)-variate indicator vector drops category ``J`` (the reference
level), so an occasion with ``O = J`` is an all-zero block.

Parameter vector layout used throughout the package::

    beta = (b_01, ..., b_0(J-1), b_x, b_z1, ..., b_zq)
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.special import expit

from .exceptions import InvalidParameterError, MalformedDataError

PROB_CLAMP = 1e-12


class MissingCode(IntEnum):
    """Per-occasion missingness code R_it."""

    BOTH_MISSING = 0
    RESPONSE_MISSING = 1
    COVARIATE_MISSING = 2
    OBSERVED = 3

    @classmethod
    def from_flags(cls, response_observed: bool, x_observed: bool) -> "MissingCode":
        return cls(2 * int(response_observed) + int(x_observed))


def missing_codes(response_observed, x_observed):
    """Vectorised R coding: ``2*I(O observed) + I(X observed)``."""
    response_observed = np.asarray(response_observed, dtype=bool)
    x_observed = np.asarray(x_observed, dtype=bool)
    if x_observed.ndim < response_observed.ndim:
        x_observed = x_observed[..., None]
    return 2 * response_observed.astype(np.int64) + x_observed.astype(np.int64)


@dataclass(frozen=True, eq=False)
class RegressionParams:
    """Cumulative-logit coefficients with strictly increasing intercepts."""

    intercepts: np.ndarray
    beta_x: float
    beta_z: np.ndarray

    def __post_init__(self):
        icpt = np.atleast_1d(np.asarray(self.intercepts, dtype=float))
        bz = np.atleast_1d(np.asarray(self.beta_z, dtype=float))
        object.__setattr__(self, "intercepts", icpt)
        object.__setattr__(self, "beta_z", bz)
        object.__setattr__(self, "beta_x", float(self.beta_x))
        check_intercepts(icpt)

    @property
    def J(self) -> int:
        return self.intercepts.size + 1

    @property
    def q(self) -> int:
        return self.beta_z.size

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.intercepts, [self.beta_x], self.beta_z])

    def __eq__(self, other):
        if not isinstance(other, RegressionParams):
            return NotImplemented
        return self.J == other.J and self.q == other.q and bool(
            np.array_equal(self.to_vector(), other.to_vector()))

    __hash__ = None

    @classmethod
    def from_vector(cls, vec, J: int) -> "RegressionParams":
        vec = np.asarray(vec, dtype=float)
        return cls(vec[: J - 1], vec[J - 1], vec[J:])

    def names(self) -> list[str]:
        return parameter_names(self.J, self.q)


def parameter_names(J: int, q: int, z_names: Optional[Sequence[str]] = None) -> list[str]:
    z_names = list(z_names) if z_names is not None else [f"z{k + 1}" for k in range(q)]
    return [f"beta0{j + 1}" for j in range(J - 1)] + ["x"] + z_names


def check_intercepts(intercepts) -> None:
    icpt = np.asarray(intercepts, dtype=float)
    if not np.all(np.isfinite(icpt)):
        raise InvalidParameterError("intercepts must be finite")
    if icpt.size > 1 and np.any(np.diff(icpt) <= 0):
        raise InvalidParameterError(f"intercepts must be strictly increasing, got {icpt}")


def as_beta_vector(beta) -> np.ndarray:
    if isinstance(beta, RegressionParams):
        return beta.to_vector()
    return np.asarray(beta, dtype=float)


@dataclass(frozen=True)
class SubjectRecord:
    """One subject's occasions; ``responses[t] is None`` marks a missing O_it."""

    id: object
    times: tuple
    responses: tuple
    x: Optional[float]
    z: np.ndarray

    @property
    def n_occasions(self) -> int:
        return len(self.times)

    @property
    def r_codes(self) -> tuple:
        x_obs = self.x is not None
        return tuple(MissingCode.from_flags(o is not None, x_obs) for o in self.responses)


@dataclass(frozen=True, eq=False)
class OrdinalPanel:
    """Padded-array panel of ordinal responses.

    Attributes
    ----------
    y : int array (n, T)
        Responses in ``1..J``; ``0`` where missing or where the occasion
        does not exist for the subject.
    present : bool array (n, T)
        Occasion exists for the subject (scheduled visit).
    x : float array (n,)
        Baseline covariate, ``nan`` when missing.
    z : float array (n, T, q)
        Time-varying covariates (fully observed on present occasions).
    """

    y: np.ndarray
    present: np.ndarray
    x: np.ndarray
    z: np.ndarray
    J: int
    ids: tuple = field(default=())
    times: tuple = field(default=())
    z_names: tuple = field(default=())

    def __post_init__(self):
        y = np.asarray(self.y, dtype=np.int64)
        if y.ndim != 2:
            raise MalformedDataError("y must be (n, T)")
        n, T = y.shape
        present = np.asarray(self.present, dtype=bool)
        x = np.asarray(self.x, dtype=float).reshape(n)
        z = np.asarray(self.z, dtype=float)
        if z.ndim == 2:
            z = z[:, :, None]
        if present.shape != (n, T) or z.shape[:2] != (n, T):
            raise MalformedDataError("inconsistent panel array shapes")
        J = int(self.J)
        if J < 2:
            raise MalformedDataError("J must be at least 2")
        if np.any((y < 0) | (y > J)):
            bad = np.argwhere((y < 0) | (y > J))[0]
            raise MalformedDataError(
                f"response {y[tuple(bad)]} outside 1..{J} (subject index {bad[0]}, occasion {bad[1]})"
            )
        if np.any((y > 0) & ~present):
            raise MalformedDataError("response recorded on an absent occasion")
        if np.any(present.sum(axis=1) < 1):
            raise MalformedDataError("every subject needs at least one occasion")
        if not np.all(np.isfinite(z[present])):
            raise MalformedDataError("time-varying covariates must be fully observed")
        z = np.where(present[:, :, None], z, 0.0)
        ids = tuple(self.ids) if len(self.ids) else tuple(range(n))
        times = tuple(self.times) if len(self.times) else tuple(range(1, T + 1))
        z_names = tuple(self.z_names) if len(self.z_names) else tuple(f"z{k + 1}" for k in range(z.shape[2]))
        for name, val in (("y", y), ("present", present), ("x", x), ("z", z), ("J", J),
                          ("ids", ids), ("times", times), ("z_names", z_names)):
            if isinstance(val, np.ndarray):
                val.setflags(write=False)
            object.__setattr__(self, name, val)

    # -- shape helpers -------------------------------------------------
    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def T(self) -> int:
        return self.y.shape[1]

    @property
    def q(self) -> int:
        return self.z.shape[2]

    @property
    def p(self) -> int:
        return self.J + self.q

    @property
    def K(self) -> int:
        return self.T * (self.J - 1)

    @property
    def observed(self) -> np.ndarray:
        """Response observed, shape (n, T)."""
        return self.y > 0

    @property
    def x_observed(self) -> np.ndarray:
        return ~np.isnan(self.x)

    @property
    def r_codes(self) -> np.ndarray:
        """R_it in {0,1,2,3}; -1 on absent occasions."""
        r = missing_codes(self.observed, self.x_observed)
        return np.where(self.present, r, -1)

    @property
    def param_names(self) -> list[str]:
        return parameter_names(self.J, self.q, self.z_names)

    # -- conversions ---------------------------------------------------
    @property
    def subjects(self) -> list[SubjectRecord]:
        out = []
        for i in range(self.n):
            cols = np.flatnonzero(self.present[i])
            resp = tuple(int(self.y[i, t]) if self.y[i, t] > 0 else None for t in cols)
            xi = None if math.isnan(self.x[i]) else float(self.x[i])
            out.append(SubjectRecord(self.ids[i], tuple(self.times[t] for t in cols), resp, xi,
                                     np.array(self.z[i, cols])))
        return out

    @classmethod
    def from_subjects(cls, subjects: Iterable[SubjectRecord], J: int,
                      z_names: Sequence[str] = ()) -> "OrdinalPanel":
        subjects = list(subjects)
        if not subjects:
            raise MalformedDataError("panel has no subjects")
        all_times = sorted({t for s in subjects for t in s.times})
        col = {t: k for k, t in enumerate(all_times)}
        q = np.atleast_2d(np.asarray(subjects[0].z, dtype=float)).shape[1]
        n, T = len(subjects), len(all_times)
        y = np.zeros((n, T), dtype=np.int64)
        present = np.zeros((n, T), dtype=bool)
        z = np.zeros((n, T, q))
        x = np.full(n, np.nan)
        for i, s in enumerate(subjects):
            if list(s.times) != sorted(set(s.times)):
                raise MalformedDataError(f"subject {s.id!r}: times must be strictly increasing")
            zi = np.asarray(s.z, dtype=float).reshape(len(s.times), q)
            for k, t in enumerate(s.times):
                c = col[t]
                present[i, c] = True
                y[i, c] = 0 if s.responses[k] is None else int(s.responses[k])
                z[i, c] = zi[k]
            if s.x is not None:
                x[i] = float(s.x)
        return cls(y, present, x, z, J, ids=tuple(s.id for s in subjects),
                   times=tuple(all_times), z_names=tuple(z_names))

    def replace(self, **changes) -> "OrdinalPanel":
        kw = dict(y=self.y, present=self.present, x=self.x, z=self.z, J=self.J,
                  ids=self.ids, times=self.times, z_names=self.z_names)
        kw.update(changes)
        return OrdinalPanel(**kw)

    def subset(self, index) -> "OrdinalPanel":
        index = np.asarray(index)
        if index.dtype == bool:
            index = np.flatnonzero(index)
        return self.replace(y=self.y[index], present=self.present[index], x=self.x[index],
                            z=self.z[index], ids=tuple(self.ids[i] for i in index))

    def available_case(self) -> "OrdinalPanel":
        """Drop every occasion lacking either the response or X."""
        keep = self.observed & self.x_observed[:, None]
        return self.replace(y=np.where(keep, self.y, 0))


# ---------------------------------------------------------------------------
# indicator expansion


def indicator_block(category: int, J: int) -> np.ndarray:
    """Indicator vector of length J-1 for a single response in ``1..J``."""
    if not 1 <= int(category) <= J:
        raise MalformedDataError(f"response {category} outside 1..{J}")
    out = np.zeros(J - 1)
    if category < J:
        out[category - 1] = 1.0
    return out


def expand_indicators(panel: OrdinalPanel):
    """Stacked indicator vectors.

    Returns
    -------
    Y : ndarray (n, T*(J-1))
        Zero-filled on missing occasions.
    mask : bool ndarray (n, T*(J-1))
        True where the slot belongs to an observed response.
    """
    Y3 = indicators_3d(panel.y, panel.J)
    mask = np.repeat(panel.observed, panel.J - 1, axis=1)
    return Y3.reshape(panel.n, -1), mask


def indicators_3d(y, J: int) -> np.ndarray:
    y = np.asarray(y)
    cats = np.arange(1, J)
    return (y[..., None] == cats).astype(float)


def categories_from_indicators(Y, J: int) -> np.ndarray:
    """Inverse of the indicator expansion for complete blocks."""
    Y = np.asarray(Y).reshape(*np.shape(Y)[:-1], -1, J - 1)
    full = np.concatenate([Y, 1.0 - Y.sum(axis=-1, keepdims=True)], axis=-1)
    return full.argmax(axis=-1) + 1


# ---------------------------------------------------------------------------
# marginal mean model


def cumulative_probs(beta, x, z, J: Optional[int] = None) -> np.ndarray:
    """Pr(O <= j) for j = 1..J-1, broadcasting over leading axes of x/z."""
    b = as_beta_vector(beta)
    J = J if J is not None else _infer_J(b, z)
    icpt, bx, bz = b[: J - 1], b[J - 1], b[J:]
    eta = np.asarray(x, dtype=float) * bx + np.asarray(z, dtype=float) @ bz
    cum = expit(icpt + eta[..., None])
    return np.clip(cum, PROB_CLAMP, 1.0 - PROB_CLAMP)


def _infer_J(b, z) -> int:
    q = np.shape(z)[-1] if np.ndim(z) else 1
    return b.size - q


def marginal_probs(beta, x, z_t, J: Optional[int] = None) -> np.ndarray:
    """Category probabilities mu_j = Pr(O = j), j = 1..J-1.

    ``x`` may be scalar or array; ``z_t`` carries covariates on its last
    axis. Intercept ordering is validated.
    """
    b = as_beta_vector(beta)
    z_t = np.atleast_1d(np.asarray(z_t, dtype=float))
    J = J if J is not None else _infer_J(b, z_t)
    check_intercepts(b[: J - 1])
    cum = cumulative_probs(b, x, z_t, J)
    return np.diff(cum, axis=-1, prepend=0.0)


def mean_model(beta, x, z, J: int):
    """Means and derivatives for every subject-occasion.

    Parameters
    ----------
    beta : (p,) parameter vector
    x : (n,) baseline covariate (no nans)
    z : (n, T, q)

    Returns
    -------
    mu : (n, T, J-1)
    D : (n, T, J-1, p)   derivative of mu with respect to beta
    """
    b = as_beta_vector(beta)
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    n, T, q = z.shape
    p = b.size
    cum = cumulative_probs(b, x[:, None], z, J)
    mu = np.diff(cum, axis=-1, prepend=0.0)
    g = cum * (1.0 - cum)  # d expit
    # derivative of the cumulative probability j w.r.t. beta
    dcum = np.zeros((n, T, J - 1, p))
    jj = np.arange(J - 1)
    dcum[:, :, jj, jj] = g
    dcum[:, :, :, J - 1] = g * x[:, None, None]
    dcum[:, :, :, J:] = g[..., None] * z[:, :, None, :]
    D = dcum.copy()
    D[:, :, 1:, :] -= dcum[:, :, :-1, :]
    return mu, D


def mean_jacobian(beta, x, z_i, J: Optional[int] = None) -> np.ndarray:
    """D_i = d mu_i / d beta' for one subject, shape (T_i(J-1), p)."""
    b = as_beta_vector(beta)
    z_i = np.atleast_2d(np.asarray(z_i, dtype=float))
    J = J if J is not None else _infer_J(b, z_i)
    check_intercepts(b[: J - 1])
    _, D = mean_model(b, np.array([float(x)]), z_i[None], J)
    return D.reshape(-1, b.size)


def occasion_cov_block(mu) -> np.ndarray:
    """Multinomial covariance diag(mu) - mu mu' (batched over leading axes)."""
    mu = np.asarray(mu, dtype=float)
    V = -mu[..., :, None] * mu[..., None, :]
    idx = np.arange(mu.shape[-1])
    V[..., idx, idx] += mu
    return V


def variance_diag(mu) -> np.ndarray:
    """F_it = diag(mu_j (1 - mu_j))."""
    mu = np.asarray(mu, dtype=float)
    v = mu * (1.0 - mu)
    out = np.zeros(mu.shape + (mu.shape[-1],))
    idx = np.arange(mu.shape[-1])
    out[..., idx, idx] = v
    return out


# ---------------------------------------------------------------------------
# CSV ingestion


def _parse_cell(raw: str):
    raw = raw.strip()
    if raw == "" or raw.upper() == "NA":
        return None
    return raw


def read_panel_csv(path, J: Optional[int] = None) -> OrdinalPanel:
    """Read a long-format panel ``subject,time,response,x,z1..zq``.

    Empty cells or ``NA`` encode missing values. Any malformed row aborts
    with its 1-based line number (header is line 1).
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise MalformedDataError("empty file", row=1) from None
        if header[:4] != ["subject", "time", "response", "x"] or len(header) < 5:
            raise MalformedDataError(
                "header must be subject,time,response,x,z1..zq", row=1)
        z_names = header[4:]
        q = len(z_names)
        by_subject: dict = {}
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4 + q:
                raise MalformedDataError(f"expected {4 + q} fields, got {len(row)}", row=lineno)
            sid = row[0].strip()
            if not sid:
                raise MalformedDataError("missing subject id", row=lineno)
            try:
                time = int(row[1].strip())
            except ValueError:
                raise MalformedDataError(f"time {row[1]!r} is not an integer", row=lineno) from None
            resp = _parse_cell(row[2])
            if resp is not None:
                try:
                    resp_f = float(resp)
                except ValueError:
                    raise MalformedDataError(f"response {resp!r} is not numeric", row=lineno) from None
                if resp_f != int(resp_f) or resp_f < 1 or (J is not None and resp_f > J):
                    raise MalformedDataError(f"response {resp!r} is not a category", row=lineno)
                resp = int(resp_f)
            xv = _parse_cell(row[3])
            if xv is not None:
                try:
                    xv = float(xv)
                except ValueError:
                    raise MalformedDataError(f"x {xv!r} is not numeric", row=lineno) from None
            zs = []
            for c in row[4:]:
                cv = _parse_cell(c)
                if cv is None:
                    raise MalformedDataError("time-varying covariates must be observed", row=lineno)
                try:
                    zs.append(float(cv))
                except ValueError:
                    raise MalformedDataError(f"z value {cv!r} is not numeric", row=lineno) from None
            rec = by_subject.setdefault(sid, {"rows": [], "x": "unset"})
            if rec["x"] != "unset" and rec["x"] != xv:
                raise MalformedDataError(f"baseline x changes within subject {sid!r}", row=lineno)
            rec["x"] = xv
            if any(t == time for t, _, _ in rec["rows"]):
                raise MalformedDataError(f"duplicate time {time} for subject {sid!r}", row=lineno)
            rec["rows"].append((time, resp, zs))
    if not by_subject:
        raise MalformedDataError("no data rows", row=2)
    if J is None:
        J = max((r for rec in by_subject.values() for _, r, _ in rec["rows"] if r is not None), default=2)
        J = max(J, 2)
    subjects = []
    for sid, rec in by_subject.items():
        rows = sorted(rec["rows"], key=lambda r: r[0])
        subjects.append(SubjectRecord(
            sid, tuple(r[0] for r in rows), tuple(r[1] for r in rows),
            rec["x"], np.array([r[2] for r in rows], dtype=float).reshape(len(rows), q)))
    return OrdinalPanel.from_subjects(subjects, J, z_names=z_names)


def write_panel_csv(panel: OrdinalPanel, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject", "time", "response", "x", *panel.z_names])
        for i in range(panel.n):
            xi = "NA" if np.isnan(panel.x[i]) else repr(float(panel.x[i]))
            for t in np.flatnonzero(panel.present[i]):
                resp = str(int(panel.y[i, t])) if panel.y[i, t] > 0 else "NA"
                w.writerow([panel.ids[i], panel.times[t], resp, xi,
                            *(repr(float(v)) for v in panel.z[i, t])])
