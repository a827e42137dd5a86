"""Monte Carlo comparison of PSM and BPSM on synthetic data with a known ATT.

Covariates: ``x1 = 1[u1 > 0]`` and ``x2``, a 6-level ordinal cut from ``u2``
into equal-length bins over its realised range, with ``(u1, u2)`` standard
bivariate normal with correlation ``rho``. In misspecified mode a 10-level
``x3`` cut from a third correlated ``u3`` enters both the treatment and the
outcome model but is left out of the fitted propensity model.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import estimator
from .errors import BpsmError, NoTreatedUnits, ReplicationFailed
from .estimator import PipelineConfig
from .propensity import Dataset, McmcConfig, expit

log = logging.getLogger(__name__)

METHODS = ("PSM", "BPSM")
REPORT_COLUMNS = ("method", "pct_matched_at_least_once", "att_mean", "ci_2.5", "ci_97.5", "bias", "mab", "rmse")
REPLICATION_COLUMNS = ("j", "method", "att_estimate", "true_att", "pct_matched_at_least_once", "se")

# Two treatment-effect sizes used in the original study.
PRESETS = {
    "large-effect": {"beta": 1.0},
    "small-effect": {"beta": 0.25},
}


@dataclass(frozen=True)
class SimConfig:
    n: int = 500
    J: int = 1000
    gamma_true: tuple = (-6.0, 2.0, 1.0)
    beta: float = 1.0
    theta0: float = 0.0
    theta1: float = 2.0
    theta2: float = -2.0
    rho: float = 0.25
    misspecified: bool = False
    gamma3: float = 0.5
    theta3: float = 0.5
    with_replacement: bool = True
    caliper_sd: float | None = None
    seed: int = 0
    K: int = 1000
    B: int = 0
    burn_in: int = 2000
    thin: int = 5
    prior_var: float = 100.0
    distance: str = "ps"
    retrim_per_draw: bool = True
    truth_over: str = "treated"
    workers: int = 1

    def problems(self) -> list[str]:
        out = []
        if self.n < 50:
            out.append("n: must be >= 50")
        if self.J < 1:
            out.append("J: must be >= 1")
        if not -1 < self.rho < 1:
            out.append("rho: must lie in (-1, 1)")
        if self.caliper_sd is not None and not self.caliper_sd > 0:
            out.append("caliper_sd: must be > 0")
        if len(self.gamma_true) != 3:
            out.append("gamma_true: needs 3 entries (intercept, x1, x2)")
        if self.K < 1:
            out.append("K: must be >= 1")
        if self.B < 0 or self.B == 1:
            out.append("B: must be 0 (no bootstrap) or >= 2")
        if self.burn_in < 0:
            out.append("burn_in: must be >= 0")
        if self.thin < 1:
            out.append("thin: must be >= 1")
        if not self.prior_var > 0:
            out.append("prior_var: must be > 0")
        if self.distance not in ("ps", "linear"):
            out.append("distance: must be 'ps' or 'linear'")
        if self.truth_over not in ("treated", "all"):
            out.append("truth_over: must be 'treated' or 'all'")
        if self.workers < 1:
            out.append("workers: must be >= 1")
        return out

    @property
    def pipeline(self) -> PipelineConfig:
        caliper = self.caliper_sd
        if not self.with_replacement and caliper is None:
            caliper = 0.5
        return PipelineConfig(
            with_replacement=self.with_replacement,
            caliper_sd=caliper,
            distance=self.distance,
            retrim_per_draw=self.retrim_per_draw,
        )

    def mcmc(self, seed) -> McmcConfig:
        return McmcConfig(K=self.K, burn_in=self.burn_in, thin=self.thin, prior_var=self.prior_var, seed=seed)


@dataclass
class SimStudyReport:
    rows: list[dict]
    replications: list[dict] = field(default_factory=list)
    failures: list[tuple[int, str]] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def row(self, method: str) -> dict:
        return next(r for r in self.rows if r["method"] == method)


# --- data generation ---------------------------------------------------------


def _equal_bins(u, levels: int) -> np.ndarray:
    lo, hi = u.min(), u.max()
    if hi == lo:
        return np.ones(u.size, dtype=int)
    edges = np.linspace(lo, hi, levels + 1)
    return np.clip(np.searchsorted(edges, u, side="right"), 1, levels)


def gen_latent(n: int, rho: float, d: int, rng) -> np.ndarray:
    """``n`` draws of ``d`` standard normals with common pairwise correlation ``rho``."""
    corr = np.full((d, d), rho) + (1.0 - rho) * np.eye(d)
    return rng.multivariate_normal(np.zeros(d), corr, size=n, method="cholesky")


def gen_covariates(n: int, rho: float, misspecified: bool, rng) -> np.ndarray:
    """Design matrix ``[1, x1, x2]`` (plus ``x3`` when misspecified)."""
    if n < 2:
        raise ValueError("n must be >= 2")
    u = gen_latent(n, rho, 3 if misspecified else 2, rng)
    cols = [np.ones(n), (u[:, 0] > 0).astype(float), _equal_bins(u[:, 1], 6).astype(float)]
    if misspecified:
        cols.append(_equal_bins(u[:, 2], 10).astype(float))
    return np.column_stack(cols)


def gen_treatment(X, gamma_true, rng) -> np.ndarray:
    ps = expit(np.asarray(X, float) @ np.asarray(gamma_true, float))
    return (rng.random(ps.size) < ps).astype(np.int8)


def _outcome_eta(X, z, beta, theta):
    X = np.asarray(X, float)
    eta = theta[0] + beta * np.asarray(z, float) + theta[1] * X[:, 1] + theta[2] * X[:, 2]
    if X.shape[1] > 3:
        eta = eta + theta[3] * X[:, 3]
    return eta


def gen_outcome(X, Z, beta, theta, rng) -> np.ndarray:
    """Binary outcomes from a logistic model in (Z, x1, x2[, x3]).

    ``theta`` is ``(theta0, theta1, theta2[, theta3])``.
    """
    py = expit(_outcome_eta(X, Z, beta, theta))
    return (rng.random(py.size) < py).astype(float)


def true_att(X, Z, beta, theta, over: str = "treated") -> float:
    """Average individual effect ``P(Y=1|Z=1,x) - P(Y=1|Z=0,x)``.

    Averaged over treated units (default) or, with ``over="all"``, every unit.
    """
    Z = np.asarray(Z)
    if not np.any(Z == 1):
        raise NoTreatedUnits("true ATT needs at least one treated unit")
    n = Z.size
    te = expit(_outcome_eta(X, np.ones(n), beta, theta)) - expit(_outcome_eta(X, np.zeros(n), beta, theta))
    return float(np.mean(te if over == "all" else te[Z == 1]))


def _true_att_by_unit(X, Z, beta, theta, over="treated") -> float:
    # Independent scalar recomputation used as a per-replication cross-check.
    import math

    total, count = 0.0, 0
    for i in range(len(Z)):
        if over == "treated" and Z[i] != 1:
            continue
        lin = theta[0] + theta[1] * X[i][1] + theta[2] * X[i][2]
        if len(X[i]) > 3:
            lin += theta[3] * X[i][3]
        total += 1.0 / (1.0 + math.exp(-(lin + beta))) - 1.0 / (1.0 + math.exp(-lin))
        count += 1
    return total / count


# --- study -------------------------------------------------------------------


def _theta(cfg: SimConfig):
    theta = [cfg.theta0, cfg.theta1, cfg.theta2]
    if cfg.misspecified:
        theta.append(cfg.theta3)
    return theta


def simulate_dataset(cfg: SimConfig, rng) -> tuple[Dataset, np.ndarray]:
    """One synthetic dataset; returns it with the full (data-generating) design."""
    X_full = gen_covariates(cfg.n, cfg.rho, cfg.misspecified, rng)
    gamma = list(cfg.gamma_true) + ([cfg.gamma3] if cfg.misspecified else [])
    Z = gen_treatment(X_full, gamma, rng)
    Y = gen_outcome(X_full, Z, cfg.beta, _theta(cfg), rng)
    data = Dataset(np.arange(cfg.n), X_full[:, :3], Z, Y, "binary")
    return data, X_full


def run_replication(cfg: SimConfig, j: int) -> list[dict]:
    """Generate dataset ``j`` and estimate its ATT with both methods."""
    data_ss, psm_ss, mcmc_ss, bpsm_ss, boot_ss = np.random.SeedSequence(cfg.seed, spawn_key=(j,)).spawn(5)
    data, X_full = simulate_dataset(cfg, np.random.default_rng(data_ss))
    theta = _theta(cfg)
    truth = true_att(X_full, data.Z, cfg.beta, theta, cfg.truth_over)
    check = _true_att_by_unit(X_full.tolist(), data.Z.tolist(), cfg.beta, theta, cfg.truth_over)
    if abs(truth - check) > 1e-12:
        raise AssertionError(f"true ATT cross-check failed in replication {j}: {truth} vs {check}")

    pipe = cfg.pipeline
    psm = estimator.run_psm(data, pipe, np.random.default_rng(psm_ss))
    mcmc_seed = int(mcmc_ss.generate_state(1)[0])
    bpsm = estimator.run_bpsm(data, pipe, cfg.mcmc(mcmc_seed), bpsm_ss)
    psm_se = estimator.bootstrap_se(data, pipe, cfg.B, boot_ss).se if cfg.B else None
    return [
        {"j": j, "method": "PSM", "att_estimate": psm.att.att, "true_att": truth,
         "pct_matched_at_least_once": psm.pct_matched, "se": psm_se},
        {"j": j, "method": "BPSM", "att_estimate": bpsm.posterior.mean, "true_att": truth,
         "pct_matched_at_least_once": bpsm.pct_matched_at_least_once, "se": bpsm.posterior.sd},
    ]


def _safe_replication(args):
    cfg, j = args
    try:
        return j, run_replication(cfg, j), None
    except (BpsmError, ValueError) as exc:
        return j, None, f"{type(exc).__name__}: {exc}"


def summarize(replications: list[dict]) -> list[dict]:
    """Per-method summary rows on the x100 scale."""
    rows = []
    for method in METHODS:
        recs = [r for r in replications if r["method"] == method]
        est = 100.0 * np.array([r["att_estimate"] for r in recs])
        truth = 100.0 * np.array([r["true_att"] for r in recs])
        err = est - truth
        lo, hi = np.percentile(est, [2.5, 97.5])
        rows.append({
            "method": method,
            "pct_matched_at_least_once": float(np.mean([r["pct_matched_at_least_once"] for r in recs])),
            "att_mean": float(np.mean(est)),
            "ci_2.5": float(lo),
            "ci_97.5": float(hi),
            "bias": float(np.mean(err)),
            "mab": float(np.mean(np.abs(err))),
            "rmse": float(np.sqrt(np.mean(err**2))),
        })
    return rows


def run_study(cfg: SimConfig, workers: int | None = None, progress=None) -> SimStudyReport:
    """Run ``cfg.J`` independent replications and aggregate them.

    Replication ``j`` draws all of its randomness from ``(cfg.seed, j)``, so
    the report is identical for any number of workers. Failed replications
    are logged and excluded; more than 2% failures raises ``ReplicationFailed``.
    """
    problems = cfg.problems()
    if problems:
        raise ValueError("; ".join(problems))
    workers = cfg.workers if workers is None else workers
    tasks = [(cfg, j) for j in range(cfg.J)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_safe_replication, tasks, chunksize=max(1, cfg.J // (8 * workers))))
    else:
        results = []
        for t in tasks:
            results.append(_safe_replication(t))
            if progress is not None:
                progress(t[1])

    replications, failures = [], []
    for j, recs, err in sorted(results, key=lambda r: r[0]):
        if err is not None:
            log.warning("replication %d failed: %s", j, err)
            failures.append((j, err))
        else:
            replications.extend(recs)
    if len(failures) > 0.02 * cfg.J:
        raise ReplicationFailed(failures, cfg.J)
    if not replications:
        raise ReplicationFailed(failures, cfg.J)
    cfg_dict = asdict(cfg)
    cfg_dict["gamma_true"] = list(cfg.gamma_true)
    return SimStudyReport(summarize(replications), replications, failures, cfg_dict)


def with_preset(name: str, **overrides) -> SimConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return replace(SimConfig(), **{**PRESETS[name], **overrides})
