"""Logistic propensity model: Newton-Raphson MLE, random-walk Metropolis posterior
sampling, and score prediction from either."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ChainDiverged,
    DatasetError,
    DimensionMismatch,
    NotConverged,
    SeparationDetected,
    SingularInformation,
)

# Newton iterates whose largest coefficient exceeds this are treated as diverging.
SEPARATION_BOUND = 30.0
STEP_TOL = 1e-6


@dataclass(frozen=True)
class Dataset:
    """Units with a design matrix (intercept first), treatment flags and outcomes.

    ``outcome_type`` is ``"binary"`` or ``"continuous"``; binary outcomes must be 0/1.
    """

    ids: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    Y: np.ndarray
    outcome_type: str = "binary"

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        Z = np.asarray(self.Z)
        Y = np.asarray(self.Y, dtype=float)
        ids = np.asarray(self.ids)
        n = X.shape[0]
        if n < 2:
            raise DatasetError("need at least two units")
        if Z.shape != (n,) or Y.shape != (n,) or ids.shape != (n,):
            raise DatasetError(f"ids/Z/Y must all have length {n}")
        if not np.all(np.isfinite(X)):
            raise DatasetError("X contains non-finite entries")
        if not np.all(X[:, 0] == 1.0):
            raise DatasetError("first column of X must be the intercept (all ones)")
        if not np.all((Z == 0) | (Z == 1)):
            raise DatasetError("Z must contain only 0/1")
        Z = Z.astype(np.int8)
        if Z.sum() == 0:
            raise DatasetError("Z has no treated units (Z=1)")
        if Z.sum() == n:
            raise DatasetError("Z has no control units (Z=0)")
        if self.outcome_type not in ("binary", "continuous"):
            raise DatasetError(f"unknown outcome_type {self.outcome_type!r}")
        if not np.all(np.isfinite(Y)):
            raise DatasetError("Y contains non-finite entries")
        if self.outcome_type == "binary" and not np.all((Y == 0) | (Y == 1)):
            raise DatasetError("binary outcome Y must contain only 0/1")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "ids", ids)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def subset(self, rows: np.ndarray) -> "Dataset":
        """Rows in the given order (duplicates allowed, as in a bootstrap resample)."""
        return Dataset(self.ids[rows], self.X[rows], self.Z[rows], self.Y[rows], self.outcome_type)


@dataclass(frozen=True)
class PropensityFit:
    gamma: np.ndarray
    cov: np.ndarray
    converged: bool
    iterations: int
    loglik: float = float("nan")


@dataclass(frozen=True)
class McmcConfig:
    """Settings for the random-walk Metropolis sampler.

    Defaults: ``burn_in=2000`` discarded steps, then ``K=1000`` saved draws
    taken every ``thin=5`` steps, under independent Normal(0, ``prior_var``)
    priors on each coefficient. ``init`` is ``"mle"`` (start at the maximum
    likelihood estimate) or ``"map"`` (start at the posterior mode, which
    exists even under separation).
    """

    K: int = 1000
    burn_in: int = 2000
    thin: int = 5
    prior_var: float = 100.0
    proposal_scale: float = 2.38
    seed: int | None = 0
    init: str = "mle"

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.burn_in < 0 or self.thin < 1:
            raise ValueError("burn_in must be >= 0 and thin >= 1")
        if not self.prior_var > 0:
            raise ValueError("prior_var must be positive")
        if self.init not in ("mle", "map"):
            raise ValueError("init must be 'mle' or 'map'")


@dataclass(frozen=True)
class PosteriorDraws:
    draws: np.ndarray
    burn_in: int
    thin: int
    acceptance_rate: float
    init: np.ndarray = field(default=None, repr=False)

    @property
    def K(self) -> int:
        return self.draws.shape[0]


@dataclass(frozen=True)
class PropensityScores:
    ps: np.ndarray
    eta: np.ndarray

    def distance(self, kind: str = "ps") -> np.ndarray:
        """Matching distance measure: the score itself or the linear predictor."""
        if kind == "ps":
            return self.ps
        if kind == "linear":
            return self.eta
        raise ValueError(f"unknown distance measure {kind!r}")


def expit(eta):
    # Two-branch form keeps exp() from overflowing for large |eta|.
    eta = np.asarray(eta, dtype=float)
    out = np.empty_like(eta)
    pos = eta >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-eta[pos]))
    e = np.exp(eta[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def loglik(gamma, X, z) -> float:
    """Bernoulli log-likelihood of the logistic model."""
    eta = X @ gamma
    return float(np.sum(z * eta - np.logaddexp(0.0, eta)))


def score(gamma, X, z) -> np.ndarray:
    return X.T @ (z - expit(X @ gamma))


def hessian(gamma, X) -> np.ndarray:
    p = expit(X @ gamma)
    w = p * (1.0 - p)
    return -(X.T * w) @ X


def _newton(X, z, penalty=0.0, tol=1e-8, max_iter=100, init=None):
    """Newton-Raphson with step halving on the (optionally ridge-penalised) log-likelihood.

    ``penalty`` is the prior precision; with ``penalty=0`` this is plain MLE.
    Returns ``(gamma, information, iterations)``.
    """
    n, p = X.shape
    gamma = np.zeros(p) if init is None else np.array(init, dtype=float)

    def objective(g):
        return loglik(g, X, z) - 0.5 * penalty * float(g @ g)

    obj = objective(gamma)
    for it in range(1, max_iter + 1):
        grad = score(gamma, X, z) - penalty * gamma
        info = -hessian(gamma, X) + penalty * np.eye(p)
        try:
            step = np.linalg.solve(info, grad)
        except np.linalg.LinAlgError as exc:
            raise SingularInformation("observed information matrix is singular") from exc
        if not np.all(np.isfinite(step)) or np.linalg.cond(info) > 1e14:
            raise SingularInformation("observed information matrix is singular")
        # A vanishing gradient alone is not enough: under separation the gradient
        # decays exponentially while the Newton step stays O(1).
        if np.max(np.abs(grad)) < tol and np.max(np.abs(step)) < STEP_TOL:
            return gamma, info, it - 1
        t = 1.0
        while True:
            cand = gamma + t * step
            cand_obj = objective(cand)
            if cand_obj >= obj - 1e-12 * abs(obj) or t < 1e-10:
                break
            t *= 0.5
        gamma, obj = cand, cand_obj
        if np.max(np.abs(gamma)) > SEPARATION_BOUND:
            raise SeparationDetected(
                f"coefficients diverging (max |gamma| = {np.max(np.abs(gamma)):.1f} "
                f"after {it} iterations); treatment looks perfectly separable"
            )
    grad = score(gamma, X, z) - penalty * gamma
    raise NotConverged(f"no convergence after {max_iter} iterations (max |grad| = {np.max(np.abs(grad)):.3g})")


def fit_mle(data: Dataset, tol: float = 1e-8, max_iter: int = 100) -> PropensityFit:
    """Maximum likelihood fit of ``logit P(Z=1|X) = X @ gamma``.

    Raises
    ------
    SeparationDetected
        Iterates leave the ``|gamma| <= 30`` box.
    SingularInformation
        The observed information cannot be inverted (e.g. collinear columns).
    NotConverged
        Gradient max-norm still above ``tol`` after ``max_iter`` iterations.
    """
    X, z = data.X, data.Z.astype(float)
    gamma, info, iters = _newton(X, z, tol=tol, max_iter=max_iter)
    try:
        cov = np.linalg.inv(info)
    except np.linalg.LinAlgError as exc:
        raise SingularInformation("observed information matrix is singular") from exc
    cov = 0.5 * (cov + cov.T)
    return PropensityFit(gamma=gamma, cov=cov, converged=True, iterations=iters, loglik=loglik(gamma, X, z))


def log_posterior(gamma, X, z, prior_var: float) -> float:
    return loglik(gamma, X, z) - 0.5 * float(gamma @ gamma) / prior_var


def fit_bayes(data: Dataset, cfg: McmcConfig = McmcConfig()) -> PosteriorDraws:
    """Sample the logistic-model posterior with random-walk Metropolis-Hastings.

    The proposal is Gaussian with covariance ``(scale**2 / p)`` times the
    inverse of the posterior curvature at the starting point (observed
    information plus prior precision). With a diffuse prior that is the MLE
    covariance.
    """
    X, z = data.X, data.Z.astype(float)
    p = X.shape[1]
    precision = 1.0 / cfg.prior_var
    if cfg.init == "mle":
        start = fit_mle(data).gamma
    else:
        start, _, _ = _newton(X, z, penalty=precision)
    curvature = -hessian(start, X) + precision * np.eye(p)
    try:
        prop_cov = (cfg.proposal_scale**2 / p) * np.linalg.inv(curvature)
        chol = np.linalg.cholesky(0.5 * (prop_cov + prop_cov.T))
    except np.linalg.LinAlgError as exc:
        raise SingularInformation("cannot build proposal covariance") from exc

    rng = np.random.default_rng(cfg.seed)
    n_steps = cfg.burn_in + cfg.K * cfg.thin
    steps = rng.standard_normal((n_steps, p)) @ chol.T
    log_u = np.log(rng.random(n_steps))

    current = start.copy()
    current_lp = log_posterior(current, X, z, cfg.prior_var)
    if not np.isfinite(current_lp):
        raise ChainDiverged("non-finite log-posterior at the starting point")
    draws = np.empty((cfg.K, p))
    accepted = 0
    saved = 0
    for t in range(n_steps):
        proposal = current + steps[t]
        lp = log_posterior(proposal, X, z, cfg.prior_var)
        if not np.isfinite(lp):
            raise ChainDiverged(f"non-finite log-posterior at step {t}")
        if log_u[t] < lp - current_lp:
            current, current_lp = proposal, lp
            accepted += 1
        if t >= cfg.burn_in and (t - cfg.burn_in + 1) % cfg.thin == 0:
            draws[saved] = current
            saved += 1
    return PosteriorDraws(
        draws=draws,
        burn_in=cfg.burn_in,
        thin=cfg.thin,
        acceptance_rate=accepted / n_steps,
        init=start,
    )


def predict(gamma, X) -> PropensityScores:
    gamma = np.asarray(gamma, dtype=float)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if gamma.ndim != 1 or X.shape[1] != gamma.shape[0]:
        raise DimensionMismatch(f"X has {X.shape[1]} columns but gamma has shape {gamma.shape}")
    eta = X @ gamma
    return PropensityScores(ps=expit(eta), eta=eta)


def predict_draws(draws: PosteriorDraws, X) -> PropensityScores:
    """Scores for every draw at once; arrays are shaped (K, n)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != draws.draws.shape[1]:
        raise DimensionMismatch(f"X has {X.shape[1]} columns but draws have {draws.draws.shape[1]}")
    eta = draws.draws @ X.T
    return PropensityScores(ps=expit(eta), eta=eta)


def posterior_ps_summary(draws: PosteriorDraws, X) -> dict[str, np.ndarray]:
    """Per-unit posterior mean, sd and 2.5/97.5 percentiles of the propensity score."""
    if draws.K < 2:
        raise ValueError("need at least two draws to summarise")
    ps = predict_draws(draws, X).ps
    lo, hi = np.percentile(ps, [2.5, 97.5], axis=0)
    return {
        "mean": ps.mean(axis=0),
        "sd": ps.std(axis=0, ddof=1),
        "lo": lo,
        "hi": hi,
    }
