"""Domain types shared by every other module.

A study holds K pairs of clusters. Within pair k the two clusters sit at
positions j = 1, 2; treatment is carried by an indicator array, never by
position, so broken and proper randomization share one layout. Outcomes are
stored per individual in a single flat array ordered by (pair, position,
individual), because unequal cluster sizes change the pooled estimator.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Optional

import numpy as np
from scipy.stats import norm

from .errors import DataError

__all__ = [
    "ExperimentData",
    "PotentialOutcomeTable",
    "EstimateResult",
    "observed_from_potential",
    "validate",
    "write_experiment_csv",
    "read_experiment_csv",
    "wald_interval",
]

EXPERIMENT_CSV_HEADER = ("pair_id", "cluster_id", "treatment", "size", "covariate", "outcome")


def _frozen_array(values, dtype) -> np.ndarray:
    arr = np.ascontiguousarray(np.asarray(values, dtype=dtype))
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ExperimentData:
    """Observed data for K matched pairs of clusters.

    treatment: (K, 2) 0/1 indicators, one entry per cluster position.
    sizes: (K, 2) individual counts n_jk.
    outcomes: flat (N,) array, N = sizes.sum(), ordered by (pair, position).
    covariate: optional (K, 2) cluster-level covariate.
    """

    treatment: np.ndarray
    sizes: np.ndarray
    outcomes: np.ndarray
    covariate: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "treatment", _frozen_array(self.treatment, np.int64))
        object.__setattr__(self, "sizes", _frozen_array(self.sizes, np.int64))
        object.__setattr__(self, "outcomes", _frozen_array(self.outcomes, np.float64))
        if self.covariate is not None:
            object.__setattr__(self, "covariate", _frozen_array(self.covariate, np.float64))
        if self.treatment.ndim != 2 or self.treatment.shape[1] != 2:
            raise DataError(f"treatment must have shape (K, 2), got {self.treatment.shape}")
        if self.sizes.shape != self.treatment.shape:
            raise DataError(
                f"sizes shape {self.sizes.shape} does not match treatment {self.treatment.shape}"
            )
        if self.covariate is not None and self.covariate.shape != self.treatment.shape:
            raise DataError(
                f"covariate shape {self.covariate.shape} does not match treatment"
            )
        if self.outcomes.ndim != 1:
            raise DataError("outcomes must be a flat 1-d array")

    @property
    def n_pairs(self) -> int:
        return self.treatment.shape[0]

    @property
    def n_total(self) -> int:
        return int(self.sizes.sum())

    @cached_property
    def offsets(self) -> np.ndarray:
        """Start index of each cluster's slice in `outcomes`, shape (K, 2)."""
        flat = self.sizes.ravel()
        starts = np.concatenate(([0], np.cumsum(flat)[:-1]))
        return starts.reshape(self.sizes.shape)

    @cached_property
    def cluster_means(self) -> np.ndarray:
        """Per-cluster outcome means, shape (K, 2)."""
        self._require_consistent()
        sums = np.add.reduceat(self.outcomes, self.offsets.ravel())
        return (sums / self.sizes.ravel()).reshape(self.sizes.shape)

    @cached_property
    def cluster_ss(self) -> np.ndarray:
        """Per-cluster within sums of squares around the cluster mean, shape (K, 2)."""
        self._require_consistent()
        expanded = np.repeat(self.cluster_means.ravel(), self.sizes.ravel())
        dev2 = (self.outcomes - expanded) ** 2
        return np.add.reduceat(dev2, self.offsets.ravel()).reshape(self.sizes.shape)

    def _require_consistent(self):
        if self.n_pairs < 1 or (self.sizes < 1).any() or self.outcomes.size != self.n_total:
            problems = "; ".join(validate(self))
            raise DataError(f"inconsistent experiment data: {problems}")


@dataclass(frozen=True)
class PotentialOutcomeTable:
    """Ground truth for one generated replicate.

    Cluster-level means under control and treatment, the additive cluster
    effect tau = y1_mean - y0_mean, and the within-pair imbalance delta_k
    (position-2 control mean minus position-1 control mean). Individual
    potential outcome columns y0/y1 are flat arrays in the same order as
    ExperimentData.outcomes; they are None for a cluster-level-only table.
    """

    y0_mean: np.ndarray
    y1_mean: np.ndarray
    tau: np.ndarray
    delta: np.ndarray
    sizes: Optional[np.ndarray] = None
    y0: Optional[np.ndarray] = None
    y1: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "y0_mean", _frozen_array(self.y0_mean, np.float64))
        object.__setattr__(self, "y1_mean", _frozen_array(self.y1_mean, np.float64))
        object.__setattr__(self, "tau", _frozen_array(self.tau, np.float64))
        object.__setattr__(self, "delta", _frozen_array(self.delta, np.float64))
        for name in ("sizes", "y0", "y1"):
            value = getattr(self, name)
            if value is not None:
                dtype = np.int64 if name == "sizes" else np.float64
                object.__setattr__(self, name, _frozen_array(value, dtype))
        if self.y0_mean.ndim != 2 or self.y0_mean.shape[1] != 2:
            raise DataError(f"y0_mean must have shape (K, 2), got {self.y0_mean.shape}")
        for name in ("y1_mean", "tau"):
            if getattr(self, name).shape != self.y0_mean.shape:
                raise DataError(f"{name} shape does not match y0_mean")
        if self.delta.shape != (self.y0_mean.shape[0],):
            raise DataError("delta must have shape (K,)")

    @property
    def n_pairs(self) -> int:
        return self.y0_mean.shape[0]

    @property
    def has_individuals(self) -> bool:
        return self.y0 is not None and self.y1 is not None and self.sizes is not None


@dataclass(frozen=True)
class EstimateResult:
    """One estimator's answer: point estimate, Wald interval, bookkeeping."""

    estimator: str
    tau_hat: float
    se: float
    ci_lo: float
    ci_hi: float
    level: float = 0.95
    branch: Optional[str] = None
    lr_stat: Optional[float] = None
    converged: bool = True
    flags: tuple = ()

    def covers(self, value: float) -> bool:
        return bool(self.ci_lo <= value <= self.ci_hi)


def wald_interval(estimate: float, se: float, level: float) -> tuple:
    """Symmetric normal-quantile interval; (nan, nan) when se is not finite."""
    if not math.isfinite(se):
        return (math.nan, math.nan)
    z = float(norm.ppf(0.5 + level / 2.0))
    return (estimate - z * se, estimate + z * se)


def observed_from_potential(
    table: PotentialOutcomeTable,
    treatment,
    covariate=None,
) -> ExperimentData:
    """Reveal one potential outcome per cluster according to the assignment.

    Y_ijk = T_jk * Y_ijk(1) + (1 - T_jk) * Y_ijk(0). The covariate, when
    given, is attached unchanged.
    """
    T = np.asarray(treatment, dtype=np.int64)
    if not table.has_individuals:
        raise DataError("potential outcome table has no individual draws")
    if T.shape != table.y0_mean.shape:
        raise DataError(
            f"assignment shape {T.shape} does not match table {table.y0_mean.shape}"
        )
    per_cluster = np.repeat(T.ravel(), table.sizes.ravel()).astype(bool)
    observed = np.where(per_cluster, table.y1, table.y0)
    return ExperimentData(
        treatment=T,
        sizes=table.sizes,
        outcomes=observed,
        covariate=covariate,
    )


def validate(data: ExperimentData) -> list:
    """Return every violated invariant, empty list iff the data are valid."""
    violations = []
    if data.n_pairs < 1:
        violations.append("K must be at least 1")
    bad_pairs = np.nonzero(data.treatment.sum(axis=1) != 1)[0]
    for k in bad_pairs:
        violations.append(f"pair {k + 1} lacks exactly one treated cluster")
    if ((data.treatment != 0) & (data.treatment != 1)).any():
        violations.append("treatment entries must be 0 or 1")
    bad_sizes = np.nonzero((data.sizes < 1).ravel())[0]
    for flat in bad_sizes:
        k, j = divmod(int(flat), 2)
        violations.append(f"cluster (pair {k + 1}, position {j + 1}) has size < 1")
    declared = int(np.maximum(data.sizes, 0).sum())
    if data.outcomes.size != declared:
        violations.append(
            f"outcome length mismatch: {data.outcomes.size} values for {declared} declared individuals"
        )
    if not np.isfinite(data.outcomes).all():
        violations.append("outcomes contain non-finite values")
    if data.covariate is not None and not np.isfinite(data.covariate).all():
        violations.append("covariate contains non-finite values")
    return violations


def _format_float(x: float) -> str:
    return repr(float(x))


def write_experiment_csv(data: ExperimentData, path) -> None:
    """One row per individual: pair_id,cluster_id,treatment,size,covariate,outcome.

    pair_id is 1-based, cluster_id is the position (1 or 2), the covariate
    field repeats per cluster and stays empty when absent.
    """
    offsets = data.offsets
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EXPERIMENT_CSV_HEADER)
        for k in range(data.n_pairs):
            for j in range(2):
                size = int(data.sizes[k, j])
                cov = "" if data.covariate is None else _format_float(data.covariate[k, j])
                start = int(offsets[k, j])
                for i in range(size):
                    writer.writerow(
                        (
                            k + 1,
                            j + 1,
                            int(data.treatment[k, j]),
                            size,
                            cov,
                            _format_float(data.outcomes[start + i]),
                        )
                    )


def read_experiment_csv(path) -> ExperimentData:
    """Parse the per-individual CSV back into ExperimentData.

    Rows must be grouped by pair then cluster position, the order
    write_experiment_csv produces. Malformed cells raise DataError naming the
    row.
    """
    clusters: list = []  # (pair_id, cluster_id, treatment, size, covariate, [outcomes])
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != EXPERIMENT_CSV_HEADER:
            raise DataError(
                f"{path}: expected header {','.join(EXPERIMENT_CSV_HEADER)}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != 6:
                raise DataError(f"{path}:{lineno}: expected 6 fields, got {len(row)}")
            try:
                pair_id = int(row[0])
                cluster_id = int(row[1])
                treated = int(row[2])
                size = int(row[3])
                cov = float(row[4]) if row[4].strip() != "" else None
                outcome = float(row[5])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            if cluster_id not in (1, 2):
                raise DataError(f"{path}:{lineno}: cluster_id must be 1 or 2")
            key = (pair_id, cluster_id)
            if clusters and clusters[-1][0] == key:
                entry = clusters[-1]
                if (treated, size, cov) != entry[1]:
                    raise DataError(
                        f"{path}:{lineno}: treatment/size/covariate change within cluster {key}"
                    )
                entry[2].append(outcome)
            else:
                if any(c[0] == key for c in clusters):
                    raise DataError(
                        f"{path}:{lineno}: rows for cluster {key} are not contiguous"
                    )
                clusters.append([key, (treated, size, cov), [outcome]])

    if not clusters:
        raise DataError(f"{path}: no data rows")

    pair_ids = sorted({key[0] for key, _, _ in clusters})
    if pair_ids != list(range(1, len(pair_ids) + 1)):
        raise DataError(f"{path}: pair_id values must be 1..K, got {pair_ids}")
    by_key = {key: (meta, outs) for key, meta, outs in clusters}
    K = len(pair_ids)
    treatment = np.zeros((K, 2), dtype=np.int64)
    sizes = np.zeros((K, 2), dtype=np.int64)
    covariate = np.zeros((K, 2), dtype=np.float64)
    has_cov = None
    outcomes: list = []
    for k in range(1, K + 1):
        for j in (1, 2):
            if (k, j) not in by_key:
                raise DataError(f"{path}: pair {k} is missing cluster {j}")
            (treated, size, cov), outs = by_key[(k, j)]
            if len(outs) != size:
                raise DataError(
                    f"{path}: cluster ({k},{j}) declares size {size} but has {len(outs)} rows"
                )
            if has_cov is None:
                has_cov = cov is not None
            elif (cov is not None) != has_cov:
                raise DataError(f"{path}: covariate must be present for all clusters or none")
            treatment[k - 1, j - 1] = treated
            sizes[k - 1, j - 1] = size
            covariate[k - 1, j - 1] = cov if cov is not None else 0.0
            outcomes.extend(outs)
    return ExperimentData(
        treatment=treatment,
        sizes=sizes,
        outcomes=np.array(outcomes, dtype=np.float64),
        covariate=covariate if has_cov else None,
    )
