"""Shared builders for synthetic matched-pair datasets.

Everything here constructs ExperimentData by hand with plain numpy so the
tests do not lean on the package's own generator when checking estimators.
"""

import numpy as np
import pytest

from pairclust.core import ExperimentData


def one_hot_assignment(rng, n_pairs: int) -> np.ndarray:
    """Random (K, 2) assignment with exactly one treated cluster per pair."""
    T = np.zeros((n_pairs, 2), dtype=np.int64)
    T[np.arange(n_pairs), rng.integers(0, 2, size=n_pairs)] = 1
    return T


def synth_dataset(
    rng,
    n_pairs: int,
    sizes,
    effect: float = 0.0,
    base_mean: float = 5.0,
    noise_sd: float = 2.0,
    pair_sd: float = 0.0,
    covariate=None,
) -> ExperimentData:
    """Individual outcomes N(base + pair shift + effect * T, noise_sd^2).

    sizes: scalar (equal cluster sizes) or an (K, 2) array.
    covariate: None, or an (K, 2) array attached unchanged.
    """
    if np.isscalar(sizes):
        sizes = np.full((n_pairs, 2), int(sizes), dtype=np.int64)
    else:
        sizes = np.asarray(sizes, dtype=np.int64)
    T = one_hot_assignment(rng, n_pairs)
    shifts = rng.normal(0.0, pair_sd, size=n_pairs) if pair_sd > 0 else np.zeros(n_pairs)
    outcomes = []
    for k in range(n_pairs):
        for j in range(2):
            mean = base_mean + shifts[k] + effect * T[k, j]
            outcomes.append(rng.normal(mean, noise_sd, size=int(sizes[k, j])))
    return ExperimentData(
        treatment=T,
        sizes=sizes,
        outcomes=np.concatenate(outcomes),
        covariate=covariate,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20260819)
