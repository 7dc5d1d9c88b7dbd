"""Synthetic matched-pair cluster experiments.

The generative chain: pair-level control means (optionally left-truncated),
within-pair imbalance delta_k, inverse-mean treatment effects, multinomial
cluster sizes, individual outcomes, randomization, and one of three
cluster-level covariate constructions. Everything is pure given (config,
seed), so replicates can be regenerated in isolation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional

import numpy as np

from .core import ExperimentData, PotentialOutcomeTable, observed_from_potential
from .errors import ConfigError, DataError

__all__ = [
    "CovariateScenario",
    "RandomizationScheme",
    "DgpConfig",
    "validate_config",
    "config_to_dict",
    "config_from_dict",
    "draw_base_outcomes",
    "apply_treatment_effects",
    "draw_cluster_sizes",
    "draw_individual_outcomes",
    "randomize",
    "generate_covariates",
    "generate_experiment",
    "write_truth_csv",
]

_MAX_REJECTION_ROUNDS = 10_000

TRUTH_CSV_HEADER = ("pair_id", "cluster_id", "y0_mean", "y1_mean", "tau")


class CovariateScenario(str, Enum):
    """How the cluster-level covariate is built.

    NONE: no covariate.
    POST_TREATMENT_LINEAR: X_jk = Ybar_1k(0) + T_jk * delta_k + zeta_jk, so the
        treated cluster's covariate absorbs the pair imbalance.
    POST_TREATMENT_NONLINEAR: X_jk = log(Ybar_1k(0)) + eta_jk for control
        clusters and exp(Ybar_2k(0)) + eta_jk for treated clusters; the
        nonlinear analogue of the linear construction, since
        Ybar_2k(0) = Ybar_1k(0) + delta_k.
    PRE_TREATMENT_NONLINEAR: position-based and treatment-free,
        X_1k = log(Ybar_1k(0)) + eta_1k, X_2k = exp(Ybar_2k(0)) + eta_2k.
    """

    NONE = "none"
    POST_TREATMENT_LINEAR = "post_linear"
    POST_TREATMENT_NONLINEAR = "post_nonlinear"
    PRE_TREATMENT_NONLINEAR = "pre_nonlinear"


class RandomizationScheme(str, Enum):
    """HILL_SCOTT_FIXED always treats position 2 (the broken scheme);
    PROPER_PAIR treats one uniformly chosen cluster per pair."""

    HILL_SCOTT_FIXED = "hill_scott"
    PROPER_PAIR = "proper"


@dataclass(frozen=True)
class DgpConfig:
    """Every generative parameter.

    The numeric defaults (mu0, sigma0, sigma_eps, sigma_zeta) are
    desk-calibrated, not published values; the two scenario planners in
    the montecarlo module override them with settings calibrated to
    reproduce the qualitative sweep findings.  Truncation, eta_variance
    and effect_numerator defaults follow the source setup.
    fixed_eta, when set, is a (K, 2) nested tuple of eta values reused across
    replicates; randomization_seed, when set, drives the assignment stream
    separately from everything else.
    """

    mu0: float = 10.0
    sigma0: float = 3.0
    sigma_delta: float = 1.0
    sigma_eps: float = 5.0
    sigma_zeta: float = 1.0
    eta_variance: float = 2.0
    truncation: Optional[float] = 2.0
    effect_numerator: float = 30.0
    n_pairs: int = 10
    mean_cluster_size: float = 15.0
    scenario: CovariateScenario = CovariateScenario.NONE
    randomization: RandomizationScheme = RandomizationScheme.PROPER_PAIR
    seed: int = 0
    randomization_seed: Optional[int] = None
    fixed_eta: Optional[tuple] = None


def validate_config(config: DgpConfig) -> None:
    problems = []
    for name in ("sigma0", "sigma_delta", "sigma_eps", "sigma_zeta", "eta_variance"):
        if getattr(config, name) < 0:
            problems.append(f"{name} must be >= 0")
    if config.truncation is not None and config.truncation <= 0:
        problems.append("truncation point must be > 0")
    if config.n_pairs < 1:
        problems.append("n_pairs must be >= 1")
    if config.mean_cluster_size < 1:
        problems.append("mean_cluster_size must be >= 1")
    if config.seed < 0:
        problems.append("seed must be >= 0")
    if config.randomization_seed is not None and config.randomization_seed < 0:
        problems.append("randomization_seed must be >= 0")
    if not isinstance(config.scenario, CovariateScenario):
        problems.append(f"unknown scenario {config.scenario!r}")
    if not isinstance(config.randomization, RandomizationScheme):
        problems.append(f"unknown randomization {config.randomization!r}")
    if config.fixed_eta is not None:
        eta = np.asarray(config.fixed_eta, dtype=np.float64)
        if eta.shape != (config.n_pairs, 2):
            problems.append(
                f"fixed_eta shape {eta.shape} does not match (n_pairs, 2)"
            )
    if problems:
        raise ConfigError("; ".join(problems))


def config_to_dict(config: DgpConfig) -> dict:
    return {
        "mu0": config.mu0,
        "sigma0": config.sigma0,
        "sigma_delta": config.sigma_delta,
        "sigma_eps": config.sigma_eps,
        "sigma_zeta": config.sigma_zeta,
        "eta_variance": config.eta_variance,
        "truncation": config.truncation,
        "effect_numerator": config.effect_numerator,
        "n_pairs": config.n_pairs,
        "mean_cluster_size": config.mean_cluster_size,
        "scenario": config.scenario.value,
        "randomization": config.randomization.value,
        "seed": config.seed,
        "randomization_seed": config.randomization_seed,
        "fixed_eta": None
        if config.fixed_eta is None
        else [list(row) for row in config.fixed_eta],
    }


def config_from_dict(raw: dict) -> DgpConfig:
    known = set(config_to_dict(DgpConfig()))
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config fields: {sorted(unknown)}")
    values = dict(raw)
    if "scenario" in values:
        try:
            values["scenario"] = CovariateScenario(values["scenario"])
        except ValueError:
            raise ConfigError(
                f"unknown scenario {values['scenario']!r}; expected one of "
                f"{[s.value for s in CovariateScenario]}"
            ) from None
    if "randomization" in values:
        try:
            values["randomization"] = RandomizationScheme(values["randomization"])
        except ValueError:
            raise ConfigError(
                f"unknown randomization {values['randomization']!r}; expected one of "
                f"{[s.value for s in RandomizationScheme]}"
            ) from None
    if values.get("fixed_eta") is not None:
        values["fixed_eta"] = tuple(tuple(float(x) for x in row) for row in values["fixed_eta"])
    config = DgpConfig(**values)
    validate_config(config)
    return config


def load_config(path) -> DgpConfig:
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return config_from_dict(raw)


def draw_base_outcomes(config: DgpConfig, rng: np.random.Generator):
    """Pair-level control means: returns (Ybar_1k(0), Ybar_2k(0), delta_k).

    With truncation enabled, position-1 means are redrawn until above the
    point; position-2 means redraw only delta_k, preserving the additive
    coupling Ybar_2k(0) = Ybar_1k(0) + delta_k.
    """
    K = config.n_pairs
    y1 = rng.normal(config.mu0, config.sigma0, size=K)
    point = config.truncation
    if point is not None:
        for _ in range(_MAX_REJECTION_ROUNDS):
            bad = y1 <= point
            if not bad.any():
                break
            y1[bad] = rng.normal(config.mu0, config.sigma0, size=int(bad.sum()))
        else:
            raise ConfigError(
                f"truncation point {point} rejects essentially all base draws "
                f"(mu0={config.mu0}, sigma0={config.sigma0})"
            )
    delta = rng.normal(0.0, config.sigma_delta, size=K)
    if point is not None and config.sigma_delta > 0:
        for _ in range(_MAX_REJECTION_ROUNDS):
            bad = y1 + delta <= point
            if not bad.any():
                break
            delta[bad] = rng.normal(0.0, config.sigma_delta, size=int(bad.sum()))
        else:
            raise ConfigError(
                f"truncation point {point} rejects essentially all imbalance draws"
            )
    return y1, y1 + delta, delta


def apply_treatment_effects(y1_0, y2_0, delta, effect_numerator: float) -> PotentialOutcomeTable:
    """Cluster-level table with tau_jk = effect_numerator / Ybar_jk(0)."""
    y0_mean = np.column_stack([np.asarray(y1_0, float), np.asarray(y2_0, float)])
    if (y0_mean == 0).any():
        raise DataError(
            "a control cluster mean is exactly 0, the inverse-mean effect is "
            "undefined; enable truncation to rule this out"
        )
    tau = effect_numerator / y0_mean
    return PotentialOutcomeTable(
        y0_mean=y0_mean,
        y1_mean=y0_mean + tau,
        tau=tau,
        delta=np.asarray(delta, float),
    )


def draw_cluster_sizes(mean_cluster_size: float, cluster_count: int, rng) -> np.ndarray:
    """Allocate round(mean * count) individuals by an equal-probability
    multinomial; zero cells are bumped to 1 by transfer from the largest."""
    if cluster_count < 1:
        raise ConfigError("cluster_count must be >= 1")
    if mean_cluster_size < 1:
        raise ConfigError("mean_cluster_size must be >= 1")
    total = int(round(mean_cluster_size * cluster_count))
    sizes = rng.multinomial(total, np.full(cluster_count, 1.0 / cluster_count)).astype(np.int64)
    while (sizes == 0).any():
        zero = int(np.nonzero(sizes == 0)[0][0])
        largest = int(np.argmax(sizes))
        sizes[zero] += 1
        sizes[largest] -= 1
    return sizes


def draw_individual_outcomes(
    table: PotentialOutcomeTable, sizes, sigma_eps: float, rng
) -> PotentialOutcomeTable:
    """Fill in per-individual potential outcomes.

    One noise draw per person, shared between the two columns, so
    Y_ijk(1) - Y_ijk(0) = tau_jk holds exactly per individual; only one
    column is ever observed, so this is observationally identical to drawing
    the columns independently around their means.
    """
    sizes = np.asarray(sizes, dtype=np.int64)
    if sizes.shape != table.y0_mean.shape:
        raise DataError(f"sizes shape {sizes.shape} does not match table")
    if (sizes < 1).any():
        raise DataError("all cluster sizes must be >= 1")
    total = int(sizes.sum())
    noise = rng.normal(0.0, sigma_eps, size=total)
    y0 = np.repeat(table.y0_mean.ravel(), sizes.ravel()) + noise
    y1 = y0 + np.repeat(table.tau.ravel(), sizes.ravel())
    return replace(table, sizes=sizes, y0=y0, y1=y1)


def randomize(scheme: RandomizationScheme, n_pairs: int, rng=None) -> np.ndarray:
    """Treatment assignment, shape (K, 2) with exactly one 1 per row."""
    if n_pairs < 1:
        raise ConfigError("n_pairs must be >= 1")
    if scheme is RandomizationScheme.HILL_SCOTT_FIXED:
        return np.tile(np.array([0, 1], dtype=np.int64), (n_pairs, 1))
    if scheme is RandomizationScheme.PROPER_PAIR:
        if rng is None:
            raise ConfigError("proper randomization needs a random generator")
        T = np.zeros((n_pairs, 2), dtype=np.int64)
        T[np.arange(n_pairs), rng.integers(0, 2, size=n_pairs)] = 1
        return T
    raise ConfigError(f"unknown randomization scheme {scheme!r}")


def generate_covariates(
    scenario: CovariateScenario,
    table: PotentialOutcomeTable,
    treatment,
    sigma_zeta: float,
    eta=None,
    rng=None,
):
    """Cluster-level covariates per scenario, or None.

    eta is required for the nonlinear scenarios and is expected to be held
    fixed across replicates of a sweep; zeta noise is drawn fresh from rng.
    """
    if scenario is CovariateScenario.NONE:
        return None
    K = table.n_pairs
    T = np.asarray(treatment, dtype=np.int64)
    if T.shape != (K, 2):
        raise DataError(f"treatment shape {T.shape} does not match table")
    y0 = table.y0_mean

    if scenario is CovariateScenario.POST_TREATMENT_LINEAR:
        if rng is None:
            raise ConfigError("post-treatment linear covariates need a random generator")
        zeta = rng.normal(0.0, sigma_zeta, size=(K, 2))
        X = y0[:, :1] + T * table.delta[:, None] + zeta
    else:
        if eta is None:
            raise ConfigError(f"scenario {scenario.value} needs eta values")
        eta = np.asarray(eta, dtype=np.float64)
        if eta.shape != (K, 2):
            raise DataError(f"eta shape {eta.shape} does not match (K, 2)")
        if (y0[:, 0] <= 0).any() or (y0[:, 1] <= 0).any():
            raise DataError(
                "nonlinear covariates need positive control means; "
                "enable a positive truncation point"
            )
        log1 = np.log(y0[:, 0])
        exp2 = np.exp(y0[:, 1])
        if scenario is CovariateScenario.POST_TREATMENT_NONLINEAR:
            X = np.where(T == 1, exp2[:, None], log1[:, None]) + eta
        elif scenario is CovariateScenario.PRE_TREATMENT_NONLINEAR:
            X = np.column_stack([log1, exp2]) + eta
        else:
            raise ConfigError(f"unknown covariate scenario {scenario!r}")
    if not np.isfinite(X).all():
        raise DataError("covariate overflow: non-finite values (means too large for exp)")
    return X


def generate_experiment(config: DgpConfig, seed_seq=None):
    """Full pipeline; returns (ExperimentData, PotentialOutcomeTable).

    Six child streams (base outcomes, sizes, individuals, randomization,
    zeta, eta) are spawned from the config seed, so changing
    randomization_seed re-randomizes without touching the science draws.
    """
    validate_config(config)
    root = seed_seq if seed_seq is not None else np.random.SeedSequence(config.seed)
    streams = root.spawn(6)
    rng_base, rng_sizes, rng_indiv, rng_rand, rng_zeta, rng_eta = (
        np.random.Generator(np.random.PCG64(ss)) for ss in streams
    )
    if config.randomization_seed is not None:
        rng_rand = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(config.randomization_seed))
        )

    y1_0, y2_0, delta = draw_base_outcomes(config, rng_base)
    cluster_table = apply_treatment_effects(y1_0, y2_0, delta, config.effect_numerator)
    sizes = draw_cluster_sizes(
        config.mean_cluster_size, 2 * config.n_pairs, rng_sizes
    ).reshape(config.n_pairs, 2)
    table = draw_individual_outcomes(cluster_table, sizes, config.sigma_eps, rng_indiv)
    T = randomize(config.randomization, config.n_pairs, rng_rand)

    eta = None
    if config.scenario in (
        CovariateScenario.POST_TREATMENT_NONLINEAR,
        CovariateScenario.PRE_TREATMENT_NONLINEAR,
    ):
        if config.fixed_eta is not None:
            eta = np.asarray(config.fixed_eta, dtype=np.float64)
        else:
            eta = rng_eta.normal(
                0.0, np.sqrt(config.eta_variance), size=(config.n_pairs, 2)
            )
    X = generate_covariates(config.scenario, table, T, config.sigma_zeta, eta, rng_zeta)
    data = observed_from_potential(table, T, covariate=X)
    return data, table


def write_truth_csv(table: PotentialOutcomeTable, path) -> None:
    """Cluster-level truth: pair_id,cluster_id,y0_mean,y1_mean,tau."""
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRUTH_CSV_HEADER)
        for k in range(table.n_pairs):
            for j in range(2):
                writer.writerow(
                    (
                        k + 1,
                        j + 1,
                        repr(float(table.y0_mean[k, j])),
                        repr(float(table.y1_mean[k, j])),
                        repr(float(table.tau[k, j])),
                    )
                )
