"""The three competing estimators plus the covariate-adjustment discrepancy.

estimate_design_based: pair-level weighted mean difference with the matched
    pair variance estimator.
fit_hier_nocov: exact maximizer of the no-covariate marginal model, where
    each individual outcome is normal with arm-specific mean and variance.
    The point estimate is the pooled treated mean minus pooled control mean.
fit_hier_cov: full mixed model with pair random intercept and pair random
    effect plus a covariate term, fitted by profiled maximum likelihood.
lr_pretest_estimate: likelihood ratio selection between the mixed model with
    and without the covariate column (nested, one degree of freedom).
bias_discrepancy: Monte Carlo evaluation of the covariate-adjusted model's
    estimand gap E{g(Y + delta + zeta) - g(Y + zeta)} * beta.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.stats import chi2

from . import kernels
from .core import EstimateResult, ExperimentData, validate, wald_interval
from .dgp import DgpConfig, validate_config
from .errors import DataError, EstimationError

__all__ = [
    "HierarchicalParams",
    "DiscrepancyResult",
    "estimate_design_based",
    "fit_hier_nocov",
    "fit_hier_cov",
    "lr_pretest_estimate",
    "bias_discrepancy",
]

FATOL = 1e-8
MAXFEV = 2000

BRANCH_COVARIATE = "covariate"
BRANCH_NO_COVARIATE = "no_covariate"


@dataclass(frozen=True)
class HierarchicalParams:
    """Fitted hierarchical-model parameters.

    sigma_tau2 / sigma_alpha2 / sigma_alphatau are the pair-level effect
    variance, intercept variance and their covariance; sigma_eps2 the
    individual residual variance; beta the covariate coefficient (None for
    the no-covariate model). loglik includes all constants, so differences
    between nested fits are valid likelihood ratio statistics.
    """

    tau0: float
    alpha0: float
    sigma_tau2: float
    sigma_alpha2: float
    sigma_alphatau: float
    sigma_eps2: float
    beta: Optional[float] = None
    loglik: float = math.nan
    converged: bool = True
    n_eval: int = 0


@dataclass(frozen=True)
class DiscrepancyResult:
    """Estimand gap of the covariate-adjusted model.

    discrepancy = tau_star - expected_tau by construction; expected_tau (and
    with it tau_star) is NaN when the base law is untruncated, because the
    inverse-mean effect has no finite moments there.
    """

    tau_star: float
    expected_tau: float
    discrepancy: float
    mc_se: float
    n_mc: int
    n_nonfinite: int
    flags: tuple = ()


def _require_valid(data: ExperimentData) -> None:
    violations = validate(data)
    if violations:
        raise DataError("invalid experiment data: " + "; ".join(violations))


def _treated_index(data: ExperimentData) -> np.ndarray:
    return np.argmax(data.treatment, axis=1)


def estimate_design_based(data: ExperimentData) -> EstimateResult:
    """Weighted pair-difference estimator.

    d_k = w_k (treated cluster mean - control cluster mean) with
    w_k = K (n_1k + n_2k) / N; the point estimate is the mean of d_k and its
    variance estimate is sum (d_k - dbar)^2 / (K (K - 1)). Covariates are
    ignored entirely. With a single pair the point estimate is returned and
    inference is refused.
    """
    _require_valid(data)
    K = data.n_pairs
    means = data.cluster_means
    idx = _treated_index(data)
    rows = np.arange(K)
    diff = means[rows, idx] - means[rows, 1 - idx]
    pair_n = data.sizes.sum(axis=1)
    weights = K * pair_n / data.n_total
    d = weights * diff
    tau_hat = float(d.mean())
    if K == 1:
        return EstimateResult(
            estimator="design_based",
            tau_hat=tau_hat,
            se=math.nan,
            ci_lo=math.nan,
            ci_hi=math.nan,
            flags=("no_variance_information",),
        )
    se = float(np.sqrt(d.var(ddof=1) / K))
    lo, hi = wald_interval(tau_hat, se, 0.95)
    return EstimateResult(
        estimator="design_based", tau_hat=tau_hat, se=se, ci_lo=lo, ci_hi=hi
    )


def fit_hier_nocov(data: ExperimentData):
    """Exact MLE of the no-covariate marginal model.

    Every individual outcome is normal with mean alpha0 + tau0 T and an
    arm-specific variance, so the maximizer is available in closed form:
    tau0 is the pooled mean difference, the arm variances are the maximum
    likelihood (1/N) variances, and se(tau0) comes from the observed
    information. Verified against a dense likelihood grid search in tests.

    The four variance components are not separately identified by this
    marginal (only the two arm variances are); they are reported through a
    fixed convention: the control-arm variance goes to sigma_eps2 and the
    treated-minus-control variance gap to sigma_tau2 when it is nonnegative,
    otherwise the gap c is reported as (sigma_tau2 = c, sigma_alphatau = -c,
    sigma_alpha2 = c, sigma_eps2 = control variance - c).
    """
    _require_valid(data)
    if data.n_pairs < 2:
        raise EstimationError("the hierarchical fit needs at least 2 pairs")
    treated = np.repeat(data.treatment.ravel(), data.sizes.ravel()).astype(bool)
    y_t = data.outcomes[treated]
    y_c = data.outcomes[~treated]
    n_t, n_c = y_t.size, y_c.size
    alpha0 = float(y_c.mean())
    tau0 = float(y_t.mean()) - alpha0
    v_t = float(y_t.var())
    v_c = float(y_c.var())
    flags = ()
    if v_t <= 0.0 or v_c <= 0.0:
        loglik = math.inf
        flags = ("degenerate_variance",)
    else:
        loglik = -0.5 * (
            n_t * (math.log(2.0 * math.pi * v_t) + 1.0)
            + n_c * (math.log(2.0 * math.pi * v_c) + 1.0)
        )
    se = math.sqrt(v_t / n_t + v_c / n_c)
    lo, hi = wald_interval(tau0, se, 0.95)

    gap = v_t - v_c
    if gap >= 0.0:
        components = dict(
            sigma_eps2=v_c, sigma_tau2=gap, sigma_alpha2=0.0, sigma_alphatau=0.0
        )
    else:
        c = -gap
        components = dict(
            sigma_eps2=v_c - c, sigma_tau2=c, sigma_alpha2=c, sigma_alphatau=-c
        )
    params = HierarchicalParams(
        tau0=tau0, alpha0=alpha0, loglik=loglik, converged=True, **components
    )
    result = EstimateResult(
        estimator="hier_nocov", tau_hat=tau0, se=se, ci_lo=lo, ci_hi=hi, flags=flags
    )
    return result, params


@dataclass(frozen=True)
class _LmmFit:
    gamma: np.ndarray
    cov_gamma: np.ndarray
    theta: np.ndarray
    loglik: float
    converged: bool
    n_eval: int
    flags: tuple


def _components(theta) -> tuple:
    se2 = math.exp(theta[0])
    st2 = math.exp(theta[1])
    sa2 = math.exp(theta[2])
    rho = math.tanh(theta[3])
    return se2, st2, sa2, rho * math.sqrt(st2 * sa2)


def _pair_stats(data: ExperimentData, gvals):
    ybar = data.cluster_means
    nvec = data.sizes.astype(np.float64)
    tvec = data.treatment.astype(np.float64)
    cols = [np.ones_like(tvec)]
    if gvals is not None:
        cols.append(np.asarray(gvals, dtype=np.float64))
    cols.append(tvec)
    M = np.stack(cols, axis=2)
    sstot = float(data.cluster_ss.sum())
    dfw = float(data.n_total - 2 * data.n_pairs)
    lognsum = float(np.log(nvec).sum())
    return ybar, nvec, tvec, M, sstot, dfw, lognsum


def _moment_starts(ybar, nvec, tvec, sstot, dfw) -> np.ndarray:
    K = ybar.shape[0]
    idx = np.argmax(tvec, axis=1)
    rows = np.arange(K)
    ytr = ybar[rows, idx]
    yct = ybar[rows, 1 - idx]
    ntr = nvec[rows, idx]
    nct = nvec[rows, 1 - idx]
    scale = max(float(np.var(ybar)), 1e-6)
    se2 = sstot / dfw if dfw > 0 else 0.5 * scale
    se2 = max(se2, 1e-8 * scale)
    diff = ytr - yct
    st2 = max(
        float(np.var(diff, ddof=1)) - se2 * float(np.mean(1.0 / ntr + 1.0 / nct)),
        0.05 * scale,
    )
    sa2 = max(
        float(np.var(yct, ddof=1)) - se2 * float(np.mean(1.0 / nct)),
        0.05 * scale,
    )
    s0 = np.array([math.log(se2), math.log(st2), math.log(sa2), 0.0])
    return np.vstack(
        [
            s0,
            s0 + np.array([1.0, -1.0, -1.0, 0.6]),
            s0 + np.array([-1.0, 1.0, 1.0, -0.6]),
        ]
    )


def _gls_at(theta, ybar, nvec, tvec, M):
    se2, st2, sa2, sat = _components(theta)
    bump = st2 + 2.0 * sat
    v1 = sa2 + tvec[:, 0] * bump + se2 / nvec[:, 0]
    v2 = sa2 + tvec[:, 1] * bump + se2 / nvec[:, 1]
    cv = sa2 + sat
    det = v1 * v2 - cv * cv
    if (det <= 0).any():
        raise EstimationError("pair covariance is singular at the optimum")
    sinv = np.empty((ybar.shape[0], 2, 2))
    sinv[:, 0, 0] = v2 / det
    sinv[:, 1, 1] = v1 / det
    sinv[:, 0, 1] = sinv[:, 1, 0] = -cv / det
    A = np.einsum("kap,kab,kbq->pq", M, sinv, M)
    b = np.einsum("kap,kab,kb->p", M, sinv, ybar)
    try:
        gamma = np.linalg.solve(A, b)
        cov = np.linalg.inv(A)
    except np.linalg.LinAlgError:
        raise EstimationError("fixed-effect system is singular at the optimum") from None
    return gamma, cov


def _fit_lmm(data: ExperimentData, gvals, extra_starts=None) -> _LmmFit:
    ybar, nvec, tvec, M, sstot, dfw, lognsum = _pair_stats(data, gvals)
    starts = _moment_starts(ybar, nvec, tvec, sstot, dfw)
    if extra_starts is not None:
        starts = np.vstack([starts] + [np.asarray(s, dtype=np.float64) for s in extra_starts])
    theta, best_f, n_eval, ok = kernels.lmm_fit(
        ybar, nvec, tvec, M, sstot, dfw, lognsum,
        np.ascontiguousarray(starts, dtype=np.float64), FATOL, float(MAXFEV),
    )
    if best_f >= 1e299:
        raise EstimationError("mixed-model likelihood is degenerate for these data")
    gamma, cov = _gls_at(theta, ybar, nvec, tvec, M)
    flags = ()
    if not ok:
        flags += ("optimizer_not_converged",)
    if np.max(np.abs(theta[:3])) > 34.0:
        flags += ("variance_boundary",)
    if abs(theta[3]) > 4.0:
        flags += ("correlation_boundary",)
    return _LmmFit(
        gamma=gamma,
        cov_gamma=cov,
        theta=np.asarray(theta, dtype=np.float64),
        loglik=-float(best_f),
        converged=bool(ok),
        n_eval=int(n_eval),
        flags=flags,
    )


def _prepare_covariate(data: ExperimentData, g):
    if data.covariate is None:
        raise DataError("this estimator needs a cluster-level covariate")
    gx = np.asarray(g(data.covariate), dtype=np.float64) if g is not None else np.array(
        data.covariate, dtype=np.float64
    )
    if gx.shape != data.covariate.shape:
        raise DataError("g must map the covariate array to an equal-shaped array")
    if not np.isfinite(gx).all():
        raise DataError("g(covariate) produced non-finite values")
    return gx


def _lmm_results(fit: _LmmFit, estimator: str, beta: Optional[float], flags=()):
    se2, st2, sa2, sat = _components(fit.theta)
    tau0 = float(fit.gamma[-1])
    alpha0 = float(fit.gamma[0])
    se = float(np.sqrt(fit.cov_gamma[-1, -1]))
    lo, hi = wald_interval(tau0, se, 0.95)
    params = HierarchicalParams(
        tau0=tau0,
        alpha0=alpha0,
        sigma_tau2=st2,
        sigma_alpha2=sa2,
        sigma_alphatau=sat,
        sigma_eps2=se2,
        beta=beta,
        loglik=fit.loglik,
        converged=fit.converged,
        n_eval=fit.n_eval,
    )
    result = EstimateResult(
        estimator=estimator,
        tau_hat=tau0,
        se=se,
        ci_lo=lo,
        ci_hi=hi,
        converged=fit.converged,
        flags=tuple(flags) + fit.flags,
    )
    return result, params


def fit_hier_cov(data: ExperimentData, g: Optional[Callable] = None):
    """Profiled ML fit of the mixed model with a covariate term.

    g transforms the stored covariate (identity when None). The fixed
    effects (alpha0, beta, tau0) are solved by generalized least squares
    inside the objective; the four variance parameters are optimized by the
    kernel's simplex search. The covariate column is standardized internally
    and the coefficients mapped back, which matters when g spans many orders
    of magnitude. A constant g(X) column is collinear with the intercept, so
    beta is dropped (NaN, flagged) and the fit collapses to the no-covariate
    model.
    """
    _require_valid(data)
    if data.n_pairs < 2:
        raise EstimationError("the hierarchical fit needs at least 2 pairs")
    gx = _prepare_covariate(data, g)
    spread = float(gx.std())
    if spread == 0.0:
        result, params = fit_hier_nocov(data)
        result = EstimateResult(
            estimator="hier_cov",
            tau_hat=result.tau_hat,
            se=result.se,
            ci_lo=result.ci_lo,
            ci_hi=result.ci_hi,
            converged=result.converged,
            flags=result.flags + ("beta_inestimable",),
        )
        params = HierarchicalParams(
            tau0=params.tau0,
            alpha0=params.alpha0,
            sigma_tau2=params.sigma_tau2,
            sigma_alpha2=params.sigma_alpha2,
            sigma_alphatau=params.sigma_alphatau,
            sigma_eps2=params.sigma_eps2,
            beta=math.nan,
            loglik=params.loglik,
            converged=params.converged,
        )
        return result, params
    center = float(gx.mean())
    gs = (gx - center) / spread
    fit = _fit_lmm(data, gs)
    beta_std = float(fit.gamma[1])
    beta = beta_std / spread
    result, params = _lmm_results(fit, "hier_cov", beta)
    params = HierarchicalParams(
        tau0=params.tau0,
        alpha0=params.alpha0 - beta_std * center / spread,
        sigma_tau2=params.sigma_tau2,
        sigma_alpha2=params.sigma_alpha2,
        sigma_alphatau=params.sigma_alphatau,
        sigma_eps2=params.sigma_eps2,
        beta=beta,
        loglik=params.loglik,
        converged=params.converged,
        n_eval=params.n_eval,
    )
    return result, params


def lr_pretest_estimate(data: ExperimentData, alpha: float = 0.05) -> EstimateResult:
    """Fit the mixed model with and without the covariate column, select by
    a one-degree-of-freedom likelihood ratio test at level alpha.

    The null fit (no covariate column) is nested inside the covariate fit
    over the same dependence family, so the statistic is a valid likelihood
    ratio; the null's optimum seeds one of the covariate fit's starts, which
    keeps the statistic nonnegative up to the optimizer tolerance. If the
    covariate fit fails, the no-covariate branch is returned with a flag.
    """
    _require_valid(data)
    if not 0.0 < alpha < 1.0:
        raise EstimationError("alpha must be in (0, 1)")
    if data.covariate is None:
        raise DataError("the pretest estimator needs a cluster-level covariate")
    if data.n_pairs < 2:
        raise EstimationError("the hierarchical fit needs at least 2 pairs")
    null_fit = _fit_lmm(data, None)
    gx = _prepare_covariate(data, None)
    spread = float(gx.std())
    flags = ()
    if spread == 0.0:
        lr = 0.0
        alt_fit = None
        flags += ("beta_inestimable",)
    else:
        gs = (gx - float(gx.mean())) / spread
        try:
            alt_fit = _fit_lmm(data, gs, extra_starts=[null_fit.theta])
            lr = max(0.0, 2.0 * (alt_fit.loglik - null_fit.loglik))
        except EstimationError:
            alt_fit = None
            lr = 0.0
            flags += ("covariate_fit_failed",)
    threshold = float(chi2.ppf(1.0 - alpha, df=1))
    use_covariate = alt_fit is not None and lr > threshold
    chosen = alt_fit if use_covariate else null_fit
    result, _ = _lmm_results(chosen, "pretest", None, flags=flags)
    return EstimateResult(
        estimator="pretest",
        tau_hat=result.tau_hat,
        se=result.se,
        ci_lo=result.ci_lo,
        ci_hi=result.ci_hi,
        branch=BRANCH_COVARIATE if use_covariate else BRANCH_NO_COVARIATE,
        lr_stat=lr,
        converged=result.converged,
        flags=result.flags,
    )


_DISCREPANCY_CHUNK = 262144
_MAX_REJECTION_ROUNDS = 10_000


def bias_discrepancy(
    g: Callable, dgp: DgpConfig, beta: float, n_mc: int, seed: int = 0
) -> DiscrepancyResult:
    """Monte Carlo estimate of E{g(Y + delta + zeta) - g(Y + zeta)} * beta.

    Y follows the configured base law (truncated when the config says so),
    delta is drawn from its unconditioned normal law, and zeta from the
    covariate noise law. Each draw is evaluated with an antithetic +/- delta
    pair, which makes the identity-g case cancel pathwise and costs no bias
    because delta is symmetric. g must accept and return numpy arrays.

    expected_tau is the Monte Carlo mean of effect_numerator / Y, which only
    exists under truncation; without truncation it is reported as NaN and
    tau_star with it, while the discrepancy itself is still well defined.
    """
    validate_config(dgp)
    if n_mc < 1:
        raise EstimationError("n_mc must be >= 1")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x0D15C])))

    done = 0
    total = 0.0
    total_sq = 0.0
    tau_total = 0.0
    n_nonfinite = 0
    while done < n_mc:
        m = min(_DISCREPANCY_CHUNK, n_mc - done)
        y = rng.normal(dgp.mu0, dgp.sigma0, size=m)
        if dgp.truncation is not None:
            point = dgp.truncation
            for _ in range(_MAX_REJECTION_ROUNDS):
                bad = y <= point
                if not bad.any():
                    break
                y[bad] = rng.normal(dgp.mu0, dgp.sigma0, size=int(bad.sum()))
            else:
                raise EstimationError(
                    f"truncation point {point} rejects essentially all draws"
                )
        delta = rng.normal(0.0, dgp.sigma_delta, size=m)
        zeta = rng.normal(0.0, dgp.sigma_zeta, size=m)
        base = y + zeta
        vals = 0.5 * (np.asarray(g(base + delta), dtype=np.float64)
                      + np.asarray(g(base - delta), dtype=np.float64))
        vals -= np.asarray(g(base), dtype=np.float64)
        finite = np.isfinite(vals)
        n_nonfinite += int(m - finite.sum())
        vals = vals[finite]
        total += float(vals.sum())
        total_sq += float((vals * vals).sum())
        if dgp.truncation is not None:
            tau_total += float((dgp.effect_numerator / y).sum())
        done += m

    if n_nonfinite > 0.001 * n_mc:
        raise EstimationError(
            f"{n_nonfinite} of {n_mc} g evaluations were non-finite (> 0.1%)"
        )
    n_used = n_mc - n_nonfinite
    if n_used == 0:
        raise EstimationError("all g evaluations were non-finite")
    mean = total / n_used
    var = max(total_sq / n_used - mean * mean, 0.0)
    discrepancy = beta * mean
    mc_se = abs(beta) * math.sqrt(var / n_used)
    flags = ()
    if n_nonfinite:
        flags += ("nonfinite_g_values",)
    if dgp.truncation is not None:
        expected_tau = tau_total / n_mc
        tau_star = expected_tau + discrepancy
    else:
        expected_tau = math.nan
        tau_star = math.nan
        flags += ("expected_tau_undefined",)
    return DiscrepancyResult(
        tau_star=tau_star,
        expected_tau=expected_tau,
        discrepancy=discrepancy,
        mc_se=mc_se,
        n_mc=n_mc,
        n_nonfinite=n_nonfinite,
        flags=flags,
    )
