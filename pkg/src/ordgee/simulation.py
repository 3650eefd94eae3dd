"""Monte Carlo harness: NORTA ordinal panels, MAR gaps, method comparison.

Every replication ("attempt") draws its data from a seed derived from the
base seed and the attempt index, so all methods and association
structures analyse identical data within an attempt. A structure keeps the
first ``reps`` attempts on which every requested method converged; the
convergence rate is ``reps / attempts``.
"""

from __future__ import annotations

import json
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.special import expit, logit, ndtr

from .association import AssociationSpec
from .estimators import SCHEMA_VERSION, solve_drgee, solve_gee, solve_migee, solve_wgee
from .exceptions import OrdGEEError
from .missingness import ModelConfig, fcs_impute, fit_missingness_models
from .panel import OrdinalPanel

TRUE_BETA = (-0.4, 1.2, -0.35, 0.35)
MIN_RATE = 0.01
DEGRADED_RATE = 0.5
DEFAULT_STRUCTURES = ("corr:ind", "corr:exch", "corr:unst", "lor:unif", "lor:cat.exch",
                    "lor:time.exch", "lor:rc")


@dataclass(frozen=True)
class MethodSpec:
    """One analysis: ``kind`` in complete/available/wgee/migee/drgee.

    ``x_ok``/``r_ok`` mark correctly specified covariate and missing-data
    models; a misspecified model omits the first time-varying covariate.
    """

    kind: str
    x_ok: bool = True
    r_ok: bool = True

    @property
    def label(self) -> str:
        sx = "+" if self.x_ok else "-"
        sr = "+" if self.r_ok else "-"
        return {"complete": "Complete", "available": "Available", "wgee": f"WGEE(r{sr})",
                "migee": f"MIGEE(x{sx})", "drgee": f"DRGEE(x{sx},r{sr})"}[self.kind]

    @classmethod
    def parse(cls, text: str) -> "MethodSpec":
        t = text.strip().lower().replace(" ", "")
        kind = t.split("(")[0]
        if kind not in ("complete", "available", "wgee", "migee", "drgee"):
            raise ValueError(f"unknown method {text!r}")
        inner = t[len(kind):].strip("()")
        flags = dict(x=True, r=True)
        for part in filter(None, inner.split(",")):
            if part[0] not in "xr" or part[1:] not in ("+", "-"):
                raise ValueError(f"bad model flag {part!r} in {text!r}")
            flags[part[0]] = part[1:] == "+"
        return cls(kind, flags["x"], flags["r"])

    def config(self, base: ModelConfig) -> ModelConfig:
        cfg = replace(base)
        if not self.r_ok:
            cfg = replace(cfg, missing_x=[p for p in cfg.missing_x if p != "z1"])
        if not self.x_ok:
            cfg = replace(cfg, covariate=[p for p in cfg.covariate if p != "z1"])
        return cfg


TABLE1_METHODS = ("Available", "WGEE(r-)", "MIGEE(x-)", "DRGEE(x-,r-)")
TABLE2_METHODS = ("Complete", "WGEE(r+)", "MIGEE(x+)", "DRGEE(x+,r+)", "DRGEE(x-,r+)", "DRGEE(x+,r-)")


@dataclass(frozen=True)
class Scenario:
    """Simulation design; defaults follow the reference study."""

    name: str = "paper-table2"
    n: int = 300
    T: int = 3
    J: int = 3
    reps: int = 200
    beta: tuple = TRUE_BETA
    rho: float = 0.7
    z_var: float = 0.5
    gamma: tuple = (0.0, 2.0)
    psi_x: tuple = (1.2, -1.5, -1.5)
    psi_y: tuple = (0.6, -1.5, 2.5, -1.3)
    methods: tuple = TABLE2_METHODS
    structures: tuple = ("corr:ind", "corr:exch", "lor:unif")
    seed: int = 0
    imputations: int = 10
    omega: float = 0.5
    mc_draws: int = 1000
    weight_floor: float = 0.01
    max_attempt_factor: float = 1.0 / MIN_RATE

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("n must be at least 2")
        if self.reps < 1:
            raise ValueError("reps must be positive")
        if len(self.beta) != self.J + 1:
            raise ValueError("beta must hold J-1 intercepts, beta_x and beta_z")
        if any(np.diff(self.beta[: self.J - 1]) <= 0):
            raise ValueError("intercepts must be increasing")
        for m in self.methods:
            MethodSpec.parse(m)
        for s in self.structures:
            AssociationSpec.parse(s)

    @classmethod
    def preset(cls, name: str, **overrides) -> "Scenario":
        presets = {
            "paper-table1": dict(name="paper-table1", methods=TABLE1_METHODS),
            "paper-table2": dict(name="paper-table2", methods=TABLE2_METHODS),
            "paper-n50": dict(name="paper-n50", n=50, reps=100, methods=TABLE2_METHODS,
                              structures=("corr:ind", "corr:unst", "lor:unif")),
        }
        if name not in presets:
            raise ValueError(f"unknown scenario {name!r}; choose from {sorted(presets)}")
        args = dict(presets[name])
        args.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**args)

    def model_config(self) -> ModelConfig:
        return ModelConfig(omega=self.omega, mc_draws=self.mc_draws, weight_floor=self.weight_floor,
                           imputations=self.imputations)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


# ---------------------------------------------------------------------------
# data generation


def generate_panel(scenario: Scenario, rng) -> OrdinalPanel:
    """Complete panel from the cumulative-logit marginal model.

    Latent exchangeable normals are mapped through the normal CDF and the
    logistic quantile, then cut at the linear-predictor-shifted cutpoints:
    ``O = 1 + #{j : L > beta_0j + eta}`` so ``Pr(O <= j) = expit(beta_0j + eta)``.
    """
    n, T, J = scenario.n, scenario.T, scenario.J
    b = np.asarray(scenario.beta, dtype=float)
    z = rng.normal(0.0, math.sqrt(scenario.z_var), size=(n, T, 1))
    g0, g1 = scenario.gamma
    x = (rng.random(n) < expit(g0 + g1 * z[:, 0, 0])).astype(float)
    common = rng.standard_normal((n, 1))
    eps = rng.standard_normal((n, T))
    latent = math.sqrt(scenario.rho) * common + math.sqrt(1.0 - scenario.rho) * eps
    L = logit(np.clip(ndtr(latent), 1e-16, 1 - 1e-16))
    eta = x[:, None] * b[J - 1] + z[..., 0] * b[J]
    cuts = b[: J - 1][None, None, :] + eta[..., None]
    y = 1 + (L[..., None] > cuts).sum(axis=-1)
    return OrdinalPanel(y=y.astype(np.int64), present=np.ones((n, T), bool), x=x, z=z, J=J)


def inject_missingness(panel: OrdinalPanel, scenario: Scenario, rng) -> OrdinalPanel:
    """Blank X and responses at t >= 2 according to the scenario's logits.

    The logistic models give the probability that an item is *missing*:
    ``logit Pr(X missing) = psi_x0 + psi_x1 O_1 + psi_x2 Z_1`` and
    ``logit Pr(O_t missing) = psi_y0 + psi_y1 O*_{t-1} + psi_y2 I(O_{t-1}
    missing) + psi_y3 Z_t`` with ``O*_{t-1}`` the previous response if
    observed and 0 otherwise. The first response is always observed, so
    missingness depends only on observed history (MAR).
    """
    n, T = panel.n, panel.T
    px = scenario.psi_x
    miss_x = rng.random(n) < expit(px[0] + px[1] * panel.y[:, 0] + px[2] * panel.z[:, 0, 0])
    py = scenario.psi_y
    miss = np.zeros((n, T), dtype=bool)
    for t in range(1, T):
        ostar = np.where(miss[:, t - 1], 0, panel.y[:, t - 1])
        lin = py[0] + py[1] * ostar + py[2] * miss[:, t - 1] + py[3] * panel.z[:, t, 0]
        miss[:, t] = rng.random(n) < expit(lin)
    y = np.where(miss, 0, panel.y)
    x = np.where(miss_x, np.nan, panel.x)
    return panel.replace(y=y, x=x)


def missing_fraction(panel: OrdinalPanel) -> float:
    """Share of scheduled cells lacking the response or X."""
    usable = panel.observed & panel.x_observed[:, None]
    return float(1.0 - usable[panel.present].mean())


def demo_panel(n: int = 200, seed: int = 2024, missing: bool = True) -> OrdinalPanel:
    """Synthetic dataset with five effects (x and four z columns) and MAR gaps."""
    rng = np.random.default_rng(seed)
    T, J = 3, 3
    z1 = rng.normal(0.0, math.sqrt(0.5), size=(n, T))
    z2 = np.broadcast_to(np.arange(T, dtype=float) / (T - 1), (n, T))
    z3 = np.repeat((rng.random(n) < 0.5).astype(float)[:, None], T, axis=1)
    z4 = rng.normal(size=(n, T))
    z = np.stack([z1, z2, z3, z4], axis=-1)
    x = (rng.random(n) < expit(2.0 * z1[:, 0])).astype(float)
    beta = np.array([-0.4, 1.2, -0.35, 0.35, 0.3, -0.4, 0.2])
    latent = math.sqrt(0.6) * rng.standard_normal((n, 1)) + math.sqrt(0.4) * rng.standard_normal((n, T))
    L = logit(np.clip(ndtr(latent), 1e-16, 1 - 1e-16))
    eta = x[:, None] * beta[2] + z @ beta[3:]
    y = 1 + (L[..., None] > beta[:2] + eta[..., None]).sum(axis=-1)
    panel = OrdinalPanel(y=y, present=np.ones((n, T), bool), x=x, z=z, J=J,
                         z_names=("z1", "time", "group", "z4"))
    if missing:
        panel = inject_missingness(panel, Scenario(n=n), rng)
    return panel


# ---------------------------------------------------------------------------
# one attempt


def attempt_streams(seed: int, attempt: int):
    """Independent generators for data, missingness, imputation and MC."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(attempt,))
    return [np.random.default_rng(s) for s in ss.spawn(4)]


def _run_method(ms: MethodSpec, full: OrdinalPanel, obs: OrdinalPanel, spec, base_cfg, models,
                imputed, rng_mc):
    if ms.kind == "complete":
        return solve_gee(full, spec)
    if ms.kind == "available":
        return solve_gee(obs.available_case(), spec)
    if ms.kind == "wgee":
        return solve_wgee(obs, spec, models=models[("r", ms.r_ok)])
    if ms.kind == "migee":
        return solve_migee(obs, spec, completed=imputed[ms.x_ok])
    return solve_drgee(obs, spec, models=models[("dr", ms.x_ok, ms.r_ok)], rng=rng_mc)


def run_attempt(scenario: Scenario, attempt: int, structures: Sequence[str]) -> dict:
    """Fit every method under each structure on attempt ``attempt``'s data.

    Nuisance models and imputations are fitted once per attempt and shared
    by all structures. Returns ``{structure: {"ok", "beta", "se", "failure"}}``
    with ``beta``/``se`` keyed by method label.
    """
    r_data, r_miss, r_mi, r_mc = attempt_streams(scenario.seed, attempt)
    full = generate_panel(scenario, r_data)
    obs = inject_missingness(full, scenario, r_miss)
    methods = [MethodSpec.parse(m) for m in scenario.methods]
    base = scenario.model_config()
    out = {s: {"ok": True, "beta": {}, "se": {}, "failure": None} for s in structures}
    models, imputed = {}, {}
    mc_seed = r_mc.integers(2**63)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            for ms in methods:
                cfg = ms.config(base)
                if ms.kind == "wgee" and ("r", ms.r_ok) not in models:
                    models[("r", ms.r_ok)] = fit_missingness_models(obs, cfg, need_predictive=False)
                if ms.kind == "drgee" and ("dr", ms.x_ok, ms.r_ok) not in models:
                    models[("dr", ms.x_ok, ms.r_ok)] = fit_missingness_models(obs, cfg)
                if ms.kind == "migee" and ms.x_ok not in imputed:
                    imputed[ms.x_ok] = fcs_impute(obs, cfg.imputations, r_mi, cfg)
    except OrdGEEError as exc:
        for s in structures:
            out[s].update(ok=False, failure=f"nuisance model: {exc}")
        return out
    for s in structures:
        spec = AssociationSpec.parse(s)
        rec = out[s]
        for ms in methods:
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", RuntimeWarning)
                    res = _run_method(ms, full, obs, spec, base, models, imputed,
                                      np.random.default_rng(mc_seed))
            except OrdGEEError as exc:
                rec.update(ok=False, failure=f"{ms.label}: {exc}")
                break
            if not res.converged or not np.all(np.isfinite(res.se)):
                rec.update(ok=False, failure=f"{ms.label}: {res.diagnostics.get('failure', 'not converged')}")
                break
            rec["beta"][ms.label] = res.beta.tolist()
            rec["se"][ms.label] = res.se.tolist()
    return out


# ---------------------------------------------------------------------------
# metrics and report


def compute_metrics(estimates, ses, truth, ref_ses=None, level: float = 0.95) -> dict:
    """Relative bias (%), relative efficiency and empirical coverage.

    ``ref_ses`` are the independence-structure standard errors; efficiency
    is ``sum(ref_ses) / sum(ses)`` per parameter.
    """
    est = np.asarray(estimates, dtype=float)
    se = np.asarray(ses, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if np.any(truth == 0):
        raise ValueError("relative bias is undefined for a zero true value")
    bias = 100.0 * (est.mean(axis=0) - truth) / truth
    zcrit = float(np.sqrt(2.0) * _erfinv(level))
    cover = np.mean(np.abs(est - truth) <= zcrit * se, axis=0)
    ref = se if ref_ses is None else np.asarray(ref_ses, dtype=float)
    eff = ref.sum(axis=0) / se.sum(axis=0)
    return {"bias": bias.tolist(), "efficiency": eff.tolist(), "coverage": cover.tolist()}


def _erfinv(level):
    from scipy.special import erfinv

    return erfinv(level)


@dataclass
class SimReport:
    scenario: dict
    blocks: dict  # method label -> structure -> metrics
    structures: dict  # structure -> {"attempts", "successes", "convergence_rate", "status"}
    param_names: list = field(default_factory=lambda: ["beta01", "beta02", "x", "z1"])

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "scenario": self.scenario,
                "parameters": self.param_names, "structures": self.structures, "blocks": self.blocks}

    def to_json(self) -> str:
        return json.dumps(_round(self.to_dict()), indent=2, sort_keys=True)

    def table(self) -> str:
        """Relative Bias | Relative Efficiency | Empirical Coverage per method block."""
        p = len(self.param_names)
        head = (f"{'':<10}" + " ".join(f"{nm:>7}" for nm in self.param_names) + " |"
                + " ".join(f"{nm:>6}" for nm in self.param_names) + " |"
                + " ".join(f"{nm:>6}" for nm in self.param_names) + " | CR")
        lines = [f"{'':<10}{'Relative Bias':^{8 * p}}|{'Relative Efficiency':^{7 * p + 1}}|"
                 f"{'Empirical Coverage':^{7 * p + 1}}|", head]
        for label, rows in self.blocks.items():
            lines.append(f"--- {label} ---")
            for s, met in rows.items():
                info = self.structures[s]
                short = s.split(":", 1)[1]
                if met is None:
                    lines.append(f"{short:<10}" + f" {'infeasible':>{8 * p - 1}} |"
                                 + " " * (7 * p) + " |" + " " * (7 * p) + f" | {info['convergence_rate']:.2f}")
                    continue
                lines.append(f"{short:<10}" + " ".join(f"{v:>7.1f}" for v in met["bias"]) + " |"
                             + " ".join(f"{v:>6.2f}" for v in met["efficiency"]) + " |"
                             + " ".join(f"{v:>6.2f}" for v in met["coverage"])
                             + f" | {info['convergence_rate']:.2f}"
                             + ("" if info["status"] == "ok" else f" ({info['status']})"))
        return "\n".join(lines)


def _round(obj, digits: int = 10):
    if isinstance(obj, float):
        return round(obj, digits) if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _round(v, digits) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_round(v, digits) for v in obj]
    return obj


def _worker(args):
    scenario, attempt, structures = args
    return attempt, run_attempt(scenario, attempt, structures)


def run_study(scenario: Scenario, jobs: int = 1, progress=None, keep_raw: bool = False) -> SimReport:
    """Run the resampling loop for every structure and assemble the report.

    A structure whose convergence rate falls below 0.01 (no success within
    ``reps / 0.01`` attempts) is marked infeasible and stops early; one
    below 0.5 is marked degraded.
    """
    structures = list(dict.fromkeys(scenario.structures))
    labels = [MethodSpec.parse(m).label for m in scenario.methods]
    max_attempts = int(math.ceil(scenario.reps * scenario.max_attempt_factor))
    kept = {s: [] for s in structures}
    attempts = {s: 0 for s in structures}
    failures = {s: {} for s in structures}
    pending = list(structures)
    next_attempt = 0
    batch = max(1, jobs) * 4
    pool = ProcessPoolExecutor(max_workers=jobs) if jobs > 1 else None
    try:
        while pending:
            ids = list(range(next_attempt, next_attempt + batch))
            next_attempt += batch
            work = [(scenario, a, tuple(pending)) for a in ids]
            results = list(pool.map(_worker, work)) if pool else [_worker(w) for w in work]
            for a, res in sorted(results):
                for s in list(pending):
                    if len(kept[s]) >= scenario.reps or attempts[s] >= max_attempts:
                        continue
                    attempts[s] += 1
                    rec = res[s]
                    if rec["ok"]:
                        kept[s].append(rec)
                    else:
                        key = (rec["failure"] or "unknown").split(":")[0]
                        failures[s][key] = failures[s].get(key, 0) + 1
            done = [s for s in pending if len(kept[s]) >= scenario.reps or attempts[s] >= max_attempts
                    or (attempts[s] >= 200 and len(kept[s]) < MIN_RATE * attempts[s]
                        and len(kept[s]) + (max_attempts - attempts[s]) * MIN_RATE < scenario.reps)]
            for s in done:
                pending.remove(s)
            if progress is not None:
                progress({s: (len(kept[s]), attempts[s]) for s in structures})
    finally:
        if pool is not None:
            pool.shutdown()
    truth = np.asarray(scenario.beta, dtype=float)
    info = {}
    for s in structures:
        S = len(kept[s])
        cr = S / attempts[s] if attempts[s] else 0.0
        if S < scenario.reps or cr < MIN_RATE:
            status = "infeasible"
        elif cr < DEGRADED_RATE:
            status = "degraded"
        else:
            status = "ok"
        info[s] = {"attempts": attempts[s], "successes": S, "convergence_rate": cr, "status": status,
                   "failures": failures[s]}
    ref = {}
    for s in structures:
        if AssociationSpec.parse(s).is_independence and info[s]["status"] != "infeasible":
            ref = {lab: np.array([k["se"][lab] for k in kept[s]]) for lab in labels}
            break
    blocks = {}
    for lab in labels:
        blocks[lab] = {}
        for s in structures:
            if info[s]["status"] == "infeasible":
                blocks[lab][s] = None
                continue
            est = np.array([k["beta"][lab] for k in kept[s]])
            se = np.array([k["se"][lab] for k in kept[s]])
            met = compute_metrics(est, se, truth, ref.get(lab))
            met["mean_se"] = se.mean(axis=0).tolist()
            met["sd_estimate"] = est.std(axis=0, ddof=1).tolist() if len(est) > 1 else None
            if keep_raw:
                met["estimates"] = est.tolist()
                met["ses"] = se.tolist()
            blocks[lab][s] = met
    return SimReport(scenario.to_dict(), blocks, info)
