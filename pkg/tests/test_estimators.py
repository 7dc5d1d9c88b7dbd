"""Estimator oracles.

The heavy artillery lives here:

* the closed-form no-covariate fit is checked against a direct evaluation of
  its likelihood plus a random-perturbation dominance sweep;
* the profiled mixed-model objective is checked against a dense N-dimensional
  multivariate-normal likelihood built from scratch (full covariance matrix,
  explicit GLS), which independently verifies the within/between likelihood
  factorization, the pair covariance structure, and the fixed-effect
  profiling;
* the covariate-model fit must recover planted coefficients and dominate
  random variance-parameter draws;
* the discrepancy tool is checked against exact closed forms for identity,
  square, and cube transforms, and against quadrature for the truncated
  inverse-mean effect.
"""

import math

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.stats import chi2, norm

from pairclust import kernels
from pairclust.core import ExperimentData
from pairclust.dgp import DgpConfig
from pairclust.errors import DataError, EstimationError
from pairclust.estimators import (
    BRANCH_COVARIATE,
    BRANCH_NO_COVARIATE,
    bias_discrepancy,
    estimate_design_based,
    fit_hier_cov,
    fit_hier_nocov,
    lr_pretest_estimate,
)

from conftest import one_hot_assignment, synth_dataset


# ---------------------------------------------------------------- design


def test_design_hand_example():
    data = ExperimentData(
        treatment=[[0, 1], [1, 0]],
        sizes=[[2, 1], [1, 1]],
        outcomes=[1.0, 3.0, 5.0, 7.0, 4.0],
    )
    res = estimate_design_based(data)
    # pair differences 3 and 3, weights 2*3/5 and 2*2/5
    assert res.tau_hat == pytest.approx(3.0, abs=1e-12)
    assert res.se == pytest.approx(0.6, abs=1e-12)
    z = norm.ppf(0.975)
    assert res.ci_lo == pytest.approx(3.0 - z * 0.6, abs=1e-12)
    assert res.ci_hi == pytest.approx(3.0 + z * 0.6, abs=1e-12)
    assert res.converged and res.flags == ()


def test_design_single_pair_refuses_inference(rng):
    data = synth_dataset(rng, 1, 4, effect=2.0)
    res = estimate_design_based(data)
    assert math.isfinite(res.tau_hat)
    assert math.isnan(res.se) and math.isnan(res.ci_lo)
    assert "no_variance_information" in res.flags


def test_design_rejects_invalid_data():
    broken = ExperimentData(treatment=[[1, 1]], sizes=[[1, 1]], outcomes=[1.0, 2.0])
    with pytest.raises(DataError):
        estimate_design_based(broken)


# ---------------------------------------------------- no-covariate model


def _arm_loglik(data, alpha, tau, v_c, v_t):
    treated = np.repeat(data.treatment.ravel(), data.sizes.ravel()).astype(bool)
    y_t = data.outcomes[treated]
    y_c = data.outcomes[~treated]
    ll = -0.5 * np.sum(np.log(2 * np.pi * v_c) + (y_c - alpha) ** 2 / v_c)
    ll += -0.5 * np.sum(np.log(2 * np.pi * v_t) + (y_t - alpha - tau) ** 2 / v_t)
    return float(ll)


def _arm_variances(params):
    v_c = params.sigma_eps2 + params.sigma_alpha2
    v_t = v_c + params.sigma_tau2 + 2 * params.sigma_alphatau
    return v_c, v_t


def test_nocov_closed_form_is_the_mle(rng):
    data = synth_dataset(
        rng, 6, rng.integers(2, 7, size=(6, 2)), effect=2.0, pair_sd=1.0
    )
    result, params = fit_hier_nocov(data)
    v_c, v_t = _arm_variances(params)

    assert params.loglik == pytest.approx(
        _arm_loglik(data, params.alpha0, params.tau0, v_c, v_t), rel=1e-10
    )
    # no perturbation of the four free parameters may beat the closed form
    for _ in range(400):
        ll = _arm_loglik(
            data,
            params.alpha0 + rng.normal(0, 0.3),
            params.tau0 + rng.normal(0, 0.3),
            v_c * math.exp(rng.normal(0, 0.3)),
            v_t * math.exp(rng.normal(0, 0.3)),
        )
        assert ll <= params.loglik + 1e-9

    treated = np.repeat(data.treatment.ravel(), data.sizes.ravel()).astype(bool)
    n_t, n_c = int(treated.sum()), int((~treated).sum())
    assert result.se == pytest.approx(math.sqrt(v_t / n_t + v_c / n_c), rel=1e-12)


def test_nocov_matches_design_for_equal_sizes(rng):
    for _ in range(10):
        K = int(rng.integers(2, 12))
        data = synth_dataset(rng, K, int(rng.integers(1, 9)), effect=1.0, pair_sd=0.7)
        design = estimate_design_based(data)
        nocov, _ = fit_hier_nocov(data)
        assert abs(nocov.tau_hat - design.tau_hat) < 1e-10


def test_nocov_component_convention(rng):
    def build(v_first_bigger: bool):
        sd_t, sd_c = (3.0, 0.5) if v_first_bigger else (0.5, 3.0)
        T = one_hot_assignment(rng, 8)
        outcomes = []
        for k in range(8):
            for j in range(2):
                sd = sd_t if T[k, j] else sd_c
                outcomes.append(rng.normal(1.0 + 2.0 * T[k, j], sd, size=5))
        return ExperimentData(
            treatment=T, sizes=np.full((8, 2), 5), outcomes=np.concatenate(outcomes)
        )

    _, wide_treated = fit_hier_nocov(build(True))
    assert wide_treated.sigma_alpha2 == 0.0 and wide_treated.sigma_alphatau == 0.0
    assert wide_treated.sigma_tau2 > 0.0

    _, wide_control = fit_hier_nocov(build(False))
    assert wide_control.sigma_alpha2 > 0.0
    assert wide_control.sigma_alphatau == -wide_control.sigma_tau2
    # both conventions must reproduce the two arm variances
    for params, builder in ((wide_treated, True), (wide_control, False)):
        v_c, v_t = _arm_variances(params)
        assert v_c > 0 and v_t > 0


def test_nocov_needs_two_pairs(rng):
    with pytest.raises(EstimationError):
        fit_hier_nocov(synth_dataset(rng, 1, 3))


# ------------------------------------------------- mixed-model objective


def _hand_stats(data, gvals):
    """Pair statistics built with plain loops, independent of the package."""
    K = data.n_pairs
    ybar = np.empty((K, 2))
    sstot = 0.0
    pos = 0
    for k in range(K):
        for j in range(2):
            n = int(data.sizes[k, j])
            chunk = data.outcomes[pos : pos + n]
            ybar[k, j] = chunk.mean()
            sstot += float(((chunk - chunk.mean()) ** 2).sum())
            pos += n
    nvec = data.sizes.astype(np.float64)
    tvec = data.treatment.astype(np.float64)
    cols = [np.ones((K, 2))]
    if gvals is not None:
        cols.append(np.asarray(gvals, dtype=np.float64))
    cols.append(tvec)
    M = np.ascontiguousarray(np.stack(cols, axis=2))
    dfw = float(data.n_total - 2 * K)
    lognsum = float(np.log(nvec).sum())
    return ybar, nvec, tvec, M, sstot, dfw, lognsum


def _dense_profile_nll(theta, data, gvals):
    """Profile likelihood from the full N x N covariance matrix."""
    se2 = math.exp(theta[0])
    st2 = math.exp(theta[1])
    sa2 = math.exp(theta[2])
    sat = math.tanh(theta[3]) * math.sqrt(st2 * sa2)
    K = data.n_pairs
    N = data.n_total
    t = data.treatment.astype(np.float64)
    sizes = data.sizes
    offs = data.offsets

    cols = [np.ones((K, 2))]
    if gvals is not None:
        cols.append(np.asarray(gvals, dtype=np.float64))
    cols.append(t)
    M = np.stack(cols, axis=2)
    X = np.repeat(M.reshape(2 * K, M.shape[2]), sizes.ravel(), axis=0)

    V = np.zeros((N, N))
    for k in range(K):
        for j in range(2):
            for jp in range(2):
                block = sa2 + (t[k, j] + t[k, jp]) * sat + t[k, j] * t[k, jp] * st2
                r0, r1 = int(offs[k, j]), int(offs[k, j] + sizes[k, j])
                c0, c1 = int(offs[k, jp]), int(offs[k, jp] + sizes[k, jp])
                V[r0:r1, c0:c1] += block
    V += se2 * np.eye(N)

    y = data.outcomes
    Vi = np.linalg.inv(V)
    A = X.T @ Vi @ X
    gamma = np.linalg.solve(A, X.T @ Vi @ y)
    r = y - X @ gamma
    sign, logdet = np.linalg.slogdet(V)
    assert sign > 0
    return 0.5 * (N * math.log(2 * math.pi) + logdet + float(r @ Vi @ r))


def test_profile_objective_matches_dense_gaussian(rng):
    for trial in range(6):
        K = int(rng.integers(2, 5))
        data = synth_dataset(
            rng, K, rng.integers(1, 5, size=(K, 2)), effect=1.0, pair_sd=1.5
        )
        for gvals in (None, rng.normal(size=(K, 2))):
            stats = _hand_stats(data, gvals)
            for _ in range(8):
                theta = rng.uniform(-3, 3, size=4)
                kernel_value = kernels.lmm_profile_nll_python(theta, *stats)
                dense_value = _dense_profile_nll(theta, data, gvals)
                assert kernel_value == pytest.approx(dense_value, rel=1e-8, abs=1e-8)


# ------------------------------------------------------- covariate model


def planted_dataset(rng, n_pairs, beta=2.0, tau=1.5, size=6, noise=1.0):
    """Outcomes 4 + beta * x + tau * T + pair shift + noise, cluster-level x."""
    T = one_hot_assignment(rng, n_pairs)
    x = rng.normal(0.0, 2.0, size=(n_pairs, 2))
    shifts = rng.normal(0.0, 3.0, size=n_pairs)
    outcomes = []
    for k in range(n_pairs):
        for j in range(2):
            mean = 4.0 + beta * x[k, j] + tau * T[k, j] + shifts[k]
            outcomes.append(rng.normal(mean, noise, size=size))
    return ExperimentData(
        treatment=T,
        sizes=np.full((n_pairs, 2), size),
        outcomes=np.concatenate(outcomes),
        covariate=x,
    )


def test_hier_cov_recovers_planted_coefficients(rng):
    data = planted_dataset(rng, 40)
    result, params = fit_hier_cov(data)
    assert result.converged
    assert result.estimator == "hier_cov"
    assert params.beta == pytest.approx(2.0, abs=0.15)
    assert result.tau_hat == pytest.approx(1.5, abs=0.4)
    assert params.alpha0 == pytest.approx(4.0, abs=1.0)
    assert 0 < result.se < 1.0
    assert result.ci_lo < result.tau_hat < result.ci_hi


def test_hier_cov_loglik_dominates_random_thetas(rng):
    data = planted_dataset(rng, 12, size=3)
    _, params = fit_hier_cov(data)
    gx = np.asarray(data.covariate, dtype=np.float64)
    gs = (gx - gx.mean()) / gx.std()
    stats = _hand_stats(data, gs)
    for _ in range(200):
        theta = rng.uniform(-4, 4, size=4)
        assert -kernels.lmm_profile_nll_python(theta, *stats) <= params.loglik + 1e-6


def test_hier_cov_constant_covariate_falls_back(rng):
    data = synth_dataset(rng, 5, 4, effect=1.0, covariate=np.full((5, 2), 7.0))
    result, params = fit_hier_cov(data)
    nocov_result, _ = fit_hier_nocov(data)
    assert "beta_inestimable" in result.flags
    assert math.isnan(params.beta)
    assert result.estimator == "hier_cov"
    assert result.tau_hat == nocov_result.tau_hat
    assert result.se == nocov_result.se


def test_hier_cov_g_transform_equals_pretransformed_covariate(rng):
    data = planted_dataset(rng, 10, size=3)
    squared = ExperimentData(
        treatment=data.treatment,
        sizes=data.sizes,
        outcomes=data.outcomes,
        covariate=np.square(data.covariate),
    )
    via_g, params_g = fit_hier_cov(data, g=np.square)
    direct, params_d = fit_hier_cov(squared)
    assert via_g.tau_hat == direct.tau_hat
    assert via_g.se == direct.se
    assert params_g.beta == params_d.beta


def test_hier_cov_scale_invariance(rng):
    data = planted_dataset(rng, 12, size=4)
    scaled = ExperimentData(
        treatment=data.treatment,
        sizes=data.sizes,
        outcomes=data.outcomes,
        covariate=data.covariate * 1e6,
    )
    base_result, base_params = fit_hier_cov(data)
    scaled_result, scaled_params = fit_hier_cov(scaled)
    # the two runs see bit-different standardized columns, so agreement is
    # bounded by the optimizer's function tolerance, not machine precision
    assert scaled_result.tau_hat == pytest.approx(base_result.tau_hat, abs=1e-4)
    assert scaled_params.beta * 1e6 == pytest.approx(base_params.beta, rel=1e-4)


def test_hier_cov_guards(rng):
    no_cov = synth_dataset(rng, 4, 3)
    with pytest.raises(DataError, match="covariate"):
        fit_hier_cov(no_cov)
    one_pair = synth_dataset(rng, 1, 3, covariate=np.ones((1, 2)))
    with pytest.raises(EstimationError):
        fit_hier_cov(one_pair)
    data = planted_dataset(rng, 4, size=2)
    with pytest.raises(DataError, match="equal-shaped"):
        fit_hier_cov(data, g=lambda x: x[:, :1])
    with pytest.raises(DataError, match="non-finite"):
        fit_hier_cov(data, g=lambda x: np.log(x - x.max()))


# --------------------------------------------------------------- pretest


def test_pretest_selects_strong_covariate(rng):
    data = planted_dataset(rng, 30)
    res = lr_pretest_estimate(data)
    assert res.branch == BRANCH_COVARIATE
    assert res.lr_stat > chi2.ppf(0.95, df=1)
    cov_result, _ = fit_hier_cov(data)
    assert res.tau_hat == pytest.approx(cov_result.tau_hat, abs=1e-3)


def test_pretest_ignores_noise_covariate(rng):
    data = synth_dataset(
        rng, 12, 5, effect=1.0, pair_sd=1.0, covariate=rng.normal(size=(12, 2))
    )
    res = lr_pretest_estimate(data)
    assert res.branch == BRANCH_NO_COVARIATE
    assert 0.0 <= res.lr_stat <= chi2.ppf(0.95, df=1)

    # level controls the branch: a permissive level flips to the covariate
    permissive = lr_pretest_estimate(data, alpha=0.9999)
    strict = lr_pretest_estimate(data, alpha=1e-9)
    assert strict.branch == BRANCH_NO_COVARIATE
    if res.lr_stat > 1e-6:
        assert permissive.branch == BRANCH_COVARIATE


def test_pretest_constant_covariate(rng):
    data = synth_dataset(rng, 5, 4, effect=1.0, covariate=np.full((5, 2), 3.0))
    res = lr_pretest_estimate(data)
    assert res.branch == BRANCH_NO_COVARIATE
    assert res.lr_stat == 0.0
    assert "beta_inestimable" in res.flags


def test_pretest_guards(rng):
    with pytest.raises(DataError, match="covariate"):
        lr_pretest_estimate(synth_dataset(rng, 4, 3))
    data = synth_dataset(rng, 4, 3, covariate=np.ones((4, 2)) + rng.normal(size=(4, 2)))
    with pytest.raises(EstimationError, match="alpha"):
        lr_pretest_estimate(data, alpha=0.0)
    with pytest.raises(EstimationError, match="alpha"):
        lr_pretest_estimate(data, alpha=1.0)
    one_pair = synth_dataset(rng, 1, 3, covariate=np.ones((1, 2)))
    with pytest.raises(EstimationError):
        lr_pretest_estimate(one_pair)


# ----------------------------------------------------------- discrepancy


def test_discrepancy_identity_is_zero():
    config = DgpConfig(mu0=8.0, sigma0=1.5, sigma_delta=2.0, sigma_zeta=1.0)
    res = bias_discrepancy(lambda v: v, config, beta=3.0, n_mc=50_000, seed=4)
    assert abs(res.discrepancy) < 1e-12
    assert res.tau_star == pytest.approx(res.expected_tau, abs=1e-12)
    assert res.n_nonfinite == 0


def test_discrepancy_untruncated_has_no_expected_tau():
    config = DgpConfig(mu0=0.0, sigma0=1.0, sigma_delta=1.0, truncation=None)
    res = bias_discrepancy(np.square, config, beta=1.0, n_mc=10_000, seed=1)
    assert math.isnan(res.expected_tau) and math.isnan(res.tau_star)
    assert "expected_tau_undefined" in res.flags
    assert math.isfinite(res.discrepancy)


def test_discrepancy_square_matches_closed_form():
    config = DgpConfig(mu0=10.0, sigma0=2.0, sigma_delta=1.5, sigma_zeta=0.8)
    beta = 2.0
    res = bias_discrepancy(np.square, config, beta=beta, n_mc=200_000, seed=9)
    target = beta * config.sigma_delta**2
    assert abs(res.discrepancy - target) <= 4 * res.mc_se
    # the reported MC standard error must match the analytic sd of delta^2
    analytic = abs(beta) * config.sigma_delta**2 * math.sqrt(2.0 / 200_000)
    assert res.mc_se == pytest.approx(analytic, rel=0.2)


def test_discrepancy_cube_matches_closed_form():
    """For the cube, the exact value couples to the base law's mean:
    0.5((b+d)^3 + (b-d)^3) - b^3 = 3 b d^2, so the expectation is
    3 beta sigma_delta^2 E[Y + zeta] with E[Y] the truncated-normal mean."""
    from scipy.stats import truncnorm

    config = DgpConfig(mu0=6.0, sigma0=2.0, sigma_delta=1.2, sigma_zeta=0.5, truncation=2.0)
    beta = 0.7
    a = (config.truncation - config.mu0) / config.sigma0
    ey = truncnorm.mean(a, np.inf, loc=config.mu0, scale=config.sigma0)
    target = 3.0 * beta * config.sigma_delta**2 * ey
    res = bias_discrepancy(lambda v: v**3, config, beta=beta, n_mc=400_000, seed=2)
    assert abs(res.discrepancy - target) <= 5 * res.mc_se


def test_discrepancy_expected_tau_matches_quadrature():
    config = DgpConfig(mu0=10.0, sigma0=2.0, sigma_delta=1.0, truncation=2.0)
    res = bias_discrepancy(lambda v: v, config, beta=1.0, n_mc=400_000, seed=5)

    tail = norm.sf((config.truncation - config.mu0) / config.sigma0)
    integrand = lambda y: (config.effect_numerator / y) * norm.pdf(
        y, config.mu0, config.sigma0
    )
    exact, _ = quad(integrand, config.truncation, np.inf)
    exact /= tail
    assert res.expected_tau == pytest.approx(exact, abs=0.01)


def test_discrepancy_deterministic_and_guarded():
    config = DgpConfig(mu0=10.0, sigma0=2.0, sigma_delta=1.0)
    a = bias_discrepancy(np.square, config, beta=1.0, n_mc=20_000, seed=3)
    b = bias_discrepancy(np.square, config, beta=1.0, n_mc=20_000, seed=3)
    assert a == b
    c = bias_discrepancy(np.square, config, beta=1.0, n_mc=20_000, seed=4)
    assert c.discrepancy != a.discrepancy

    with pytest.raises(EstimationError, match="n_mc"):
        bias_discrepancy(np.square, config, beta=1.0, n_mc=0)

    # log explodes once base - delta goes nonpositive often enough
    wild = DgpConfig(mu0=10.0, sigma0=1.0, sigma_delta=10.0, sigma_zeta=0.0)
    with pytest.raises(EstimationError, match="non-finite"):
        bias_discrepancy(np.log, wild, beta=1.0, n_mc=20_000, seed=6)
