"""ATT estimation from matched samples, the PSM and BPSM pipelines, and bootstrap SEs."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import matcher, propensity
from .errors import BpsmError, EmptyMatchSet, ReplicateFailed
from .matcher import MatchSet
from .propensity import Dataset, McmcConfig, PosteriorDraws, PropensityFit, PropensityScores

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AttPoint:
    att: float
    p1: float
    p0: float
    n_treated: int
    n_matched_controls: int


@dataclass(frozen=True)
class AttPosterior:
    sample: np.ndarray
    mean: float
    sd: float
    ci_lo: float
    ci_hi: float
    p1: np.ndarray = None

    @classmethod
    def from_sample(cls, sample, p1=None) -> "AttPosterior":
        sample = np.asarray(sample, dtype=float)
        lo, hi = np.percentile(sample, [2.5, 97.5])
        sd = float(np.std(sample, ddof=1)) if sample.size > 1 else 0.0
        return cls(sample, float(np.mean(sample)), sd, float(lo), float(hi), p1)


@dataclass(frozen=True)
class BootstrapSe:
    se: float
    B: int
    replicates: np.ndarray
    n_failed: int = 0

    def interval(self) -> tuple[float, float]:
        lo, hi = np.percentile(self.replicates, [2.5, 97.5])
        return float(lo), float(hi)


@dataclass(frozen=True)
class PipelineConfig:
    """Matching options shared by the PSM and BPSM pipelines.

    ``multiplicity=True`` counts a control once per pairing when averaging
    control outcomes; ``False`` counts each matched control once.
    ``retrim_per_draw`` recomputes common support for every posterior draw
    (BPSM only); otherwise the bounds from the posterior-mean scores are used.
    """

    with_replacement: bool = True
    caliper_sd: float | None = None
    distance: str = "ps"
    trim: bool = True
    multiplicity: bool = True
    retrim_per_draw: bool = True

    def __post_init__(self):
        if self.caliper_sd is not None and not self.caliper_sd > 0:
            raise ValueError("caliper_sd must be positive")
        if self.distance not in ("ps", "linear"):
            raise ValueError("distance must be 'ps' or 'linear'")

    @property
    def effective_caliper_sd(self) -> float:
        return 0.5 if self.caliper_sd is None else self.caliper_sd


def att_point(matchset: MatchSet, data: Dataset, multiplicity: bool = True) -> AttPoint:
    """Treated-minus-matched-control mean outcome.

    The treated mean runs over the treated units kept in the matched sample;
    with replacement that is every treated unit. The control mean runs over
    the matched controls, once per pairing by default.
    """
    if matchset.pairs.shape[0] == 0:
        raise EmptyMatchSet()
    Y = data.Y
    treated = matchset.matched_treated
    if len(matchset.dropped_treated) == 0:
        treated = np.flatnonzero(data.Z == 1)
    controls = matchset.matched_controls if multiplicity else np.unique(matchset.matched_controls)
    p1 = float(np.mean(Y[treated]))
    p0 = float(np.mean(Y[controls]))
    return AttPoint(att=p1 - p0, p1=p1, p0=p0, n_treated=int(treated.size), n_matched_controls=int(controls.size))


def att_posterior(matchsets, data: Dataset, multiplicity: bool = True) -> AttPosterior:
    if len(matchsets) < 2:
        raise ValueError("need at least two matchsets")
    points = []
    for k, ms in enumerate(matchsets):
        try:
            points.append(att_point(ms, data, multiplicity))
        except EmptyMatchSet:
            raise EmptyMatchSet(draw=k) from None
    return AttPosterior.from_sample([pt.att for pt in points], p1=np.array([pt.p1 for pt in points]))


def drop_keep_export(ps: PropensityScores, matchset: MatchSet, Z) -> dict[str, np.ndarray]:
    """Per-unit rows (score, kept flag, treatment) for drop/keep plots."""
    n = ps.ps.shape[0]
    kept = np.zeros(n, dtype=bool)
    kept[matchset.kept_units()] = True
    return {"ps": ps.ps, "kept": kept, "z": np.asarray(Z)}


# --- pipelines ---------------------------------------------------------------


@dataclass(frozen=True)
class PsmResult:
    fit: PropensityFit
    scores: PropensityScores
    matchset: MatchSet
    att: AttPoint
    pct_matched: float


@dataclass(frozen=True)
class BpsmResult:
    draws: PosteriorDraws
    matchsets: list
    posterior: AttPosterior
    match_fraction: np.ndarray
    pct_matched_at_least_once: float


def _match(distance, Z, rng, cfg: PipelineConfig, trim: bool | None = None) -> MatchSet:
    return matcher.match_units(
        distance,
        Z,
        rng,
        with_replacement=cfg.with_replacement,
        caliper_sd=cfg.effective_caliper_sd,
        trim=cfg.trim if trim is None else trim,
    )


def run_psm(data: Dataset, cfg: PipelineConfig, rng) -> PsmResult:
    """Fit by MLE, trim, match once on the point scores, estimate the ATT."""
    fit = propensity.fit_mle(data)
    scores = propensity.predict(fit.gamma, data.X)
    ms = _match(scores.distance(cfg.distance), data.Z, rng, cfg)
    att = att_point(ms, data, cfg.multiplicity)
    pct = 100.0 * ms.kept_units().size / data.n
    return PsmResult(fit, scores, ms, att, pct)


def run_bpsm(data: Dataset, cfg: PipelineConfig, mcmc: McmcConfig, seed) -> BpsmResult:
    """Sample the propensity posterior, then match and estimate once per draw.

    Each draw's matching uses its own generator spawned from ``seed``, so the
    result does not depend on the order in which draws are processed.
    """
    draws = propensity.fit_bayes(data, mcmc)
    scores = propensity.predict_draws(draws, data.X)
    dist = scores.distance(cfg.distance)
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    seeds = ss.spawn(draws.K)
    Z = data.Z
    fixed_controls = None
    if cfg.trim and not cfg.retrim_per_draw:
        fixed_controls = matcher.trim_common_support(dist.mean(axis=0), Z)
    matchsets = []
    for k in range(draws.K):
        rng = np.random.default_rng(seeds[k])
        if fixed_controls is None:
            ms = _match(dist[k], Z, rng, cfg)
        else:
            mask = (Z == 1).copy()
            mask[fixed_controls] = True
            sub = np.flatnonzero(mask)
            ms = _match(dist[k][sub], Z[sub], rng, cfg, trim=False)
            ms = MatchSet(
                sub[ms.pairs],
                frozenset(sub[list(ms.dropped_treated)].tolist()),
                frozenset(np.setdiff1d(np.flatnonzero(Z == 0), sub[ms.pairs[:, 1]]).tolist()),
                ms.caliper_used,
            )
        matchsets.append(ms)
    posterior = att_posterior(matchsets, data, cfg.multiplicity) if draws.K >= 2 else AttPosterior.from_sample(
        [att_point(matchsets[0], data, cfg.multiplicity).att]
    )
    fraction, pct = matcher.match_frequency(matchsets, data.n)
    return BpsmResult(draws, matchsets, posterior, fraction, pct)


# --- bootstrap ---------------------------------------------------------------


def _bootstrap_replicate(args):
    data, cfg, seed = args
    rng = np.random.default_rng(seed)
    rows = rng.integers(0, data.n, size=data.n)
    try:
        return run_psm(data.subset(rows), cfg, rng).att.att
    except (BpsmError, ValueError) as exc:
        log.debug("bootstrap replicate failed: %s", exc)
        return None


def bootstrap_se(data: Dataset, cfg: PipelineConfig, B: int, seed, workers: int = 1) -> BootstrapSe:
    """Standard error of the PSM ATT by resampling units and rerunning the full pipeline.

    Replicates that fail (separation, empty pools, a resample without treated
    or control units) are excluded; more than 10% failures raises
    ``ReplicateFailed``.
    """
    if B < 2:
        raise ValueError("B must be >= 2")
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    seeds = ss.spawn(B)
    tasks = [(data, cfg, s) for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_bootstrap_replicate, tasks, chunksize=max(1, B // (4 * workers))))
    else:
        results = [_bootstrap_replicate(t) for t in tasks]
    reps = np.array([r for r in results if r is not None], dtype=float)
    n_failed = B - reps.size
    if n_failed > 0.1 * B:
        raise ReplicateFailed(n_failed, B)
    return BootstrapSe(se=float(np.std(reps, ddof=1)), B=B, replicates=reps, n_failed=n_failed)
