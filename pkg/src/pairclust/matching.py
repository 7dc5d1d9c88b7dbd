"""Pair construction before randomization.

Mahalanobis distances over cluster covariates, exact minimum-total-distance
pairing, a nearest-first greedy baseline, and coarsened pairing that bounds
per-covariate imbalance by binning first. The exact solver delegates to
networkx's blossom implementation; tests cross-check it against exhaustive
enumeration.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import networkx as nx
import numpy as np
from scipy.stats import skew

from .errors import DataError, MatchingError

__all__ = [
    "CovariateMatrix",
    "PairingResult",
    "mahalanobis_matrix",
    "optimal_pairing",
    "greedy_pairing",
    "cem_pairing",
    "balance_report",
    "sturges_bins",
    "read_covariate_csv",
    "write_pairing_csv",
    "write_balance_csv",
]

_SKEW_WARN_THRESHOLD = 2.0


@dataclass(frozen=True)
class CovariateMatrix:
    """C clusters by p covariates, with cluster identifiers."""

    values: np.ndarray
    ids: tuple = ()

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise DataError("covariate matrix must be 2-dimensional")
        if values.shape[0] < 1 or values.shape[1] < 1:
            raise DataError("covariate matrix needs at least one row and column")
        if not np.isfinite(values).all():
            raise DataError("covariate matrix has missing or non-finite entries")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        ids = self.ids or tuple(range(1, values.shape[0] + 1))
        ids = tuple(int(i) for i in ids)
        if len(ids) != values.shape[0]:
            raise DataError("cluster id count does not match the number of rows")
        if len(set(ids)) != len(ids):
            raise DataError("cluster ids must be unique")
        object.__setattr__(self, "ids", ids)

    @property
    def n_clusters(self) -> int:
        return self.values.shape[0]

    @property
    def n_covariates(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class PairingResult:
    """Disjoint cluster-id pairs plus bookkeeping.

    total equals the sum of distances. strata carries the per-pair bin
    signature for coarsened pairing (None otherwise); unmatched lists
    cluster ids left over in odd strata.
    """

    pairs: tuple
    distances: tuple
    total: float
    method: str
    strata: Optional[tuple] = None
    unmatched: tuple = ()

    def __post_init__(self):
        seen = [c for pair in self.pairs for c in pair]
        if len(seen) != len(set(seen)):
            raise MatchingError("pairs must be disjoint")
        if len(self.distances) != len(self.pairs):
            raise MatchingError("one distance per pair required")


def _as_matrix(cov) -> CovariateMatrix:
    if isinstance(cov, CovariateMatrix):
        return cov
    return CovariateMatrix(np.asarray(cov, dtype=np.float64))


def mahalanobis_matrix(
    cov,
    ridge: Optional[float] = None,
    covariance: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Pairwise d(a,b) = sqrt((x_a - x_b)' S^{-1} (x_a - x_b)).

    S is the sample covariance of the rows plus ridge * I; the default ridge
    1e-8 * trace(S)/p resolves collinear covariates without materially
    shifting distances. Pass ridge=0 to demand the unregularized metric
    (raises if S is singular). covariance overrides the estimated S, which
    the tests use to check the identity-metric reduction.
    """
    matrix = _as_matrix(cov)
    x = matrix.values
    C, p = x.shape
    if C < 2:
        raise MatchingError("need at least 2 clusters to compute distances")
    for j in range(p):
        col = x[:, j]
        if col.std() > 0:
            s = float(skew(col))
            if abs(s) > _SKEW_WARN_THRESHOLD:
                warnings.warn(
                    f"covariate {j} is heavily skewed (sample skewness {s:.2f}); "
                    "this distance assumes roughly normal inputs",
                    stacklevel=2,
                )
    if covariance is not None:
        S = np.asarray(covariance, dtype=np.float64)
        if S.shape != (p, p):
            raise MatchingError(f"covariance override must be {p}x{p}")
    else:
        S = np.cov(x, rowvar=False).reshape(p, p)
    if ridge is None:
        ridge = 1e-8 * float(np.trace(S)) / p
    if ridge < 0:
        raise MatchingError("ridge must be nonnegative")
    S = S + ridge * np.eye(p)
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        raise MatchingError(
            "covariate covariance is singular; pass a positive ridge"
        ) from None
    # solve L z = x' once, then squared distances via the Gram trick
    zt = np.linalg.solve(L, x.T)
    sq = np.sum(zt * zt, axis=0)
    gram = zt.T @ zt
    d2 = sq[:, None] + sq[None, :] - 2.0 * gram
    np.maximum(d2, 0.0, out=d2)
    d = np.sqrt(d2)
    np.fill_diagonal(d, 0.0)
    return 0.5 * (d + d.T)


def _check_distances(distances, ids) -> tuple:
    d = np.asarray(distances, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise MatchingError("distance matrix must be square")
    C = d.shape[0]
    if not np.isfinite(d).all():
        raise MatchingError("distances must be finite")
    if C % 2 != 0:
        raise MatchingError(
            f"cannot pair an odd number of clusters ({C}); drop or add one"
        )
    if ids is None:
        ids = tuple(range(1, C + 1))
    ids = tuple(int(i) for i in ids)
    if len(ids) != C:
        raise MatchingError("cluster id count does not match the distance matrix")
    return d, ids


def _ordered(pair, ids):
    a, b = ids[pair[0]], ids[pair[1]]
    return (a, b) if a <= b else (b, a)


def _result_from_index_pairs(index_pairs, d, ids, method, strata=None, unmatched=()):
    pairs = tuple(sorted(_ordered(p, ids) for p in index_pairs))
    by_ids = {_ordered(p, ids): p for p in index_pairs}
    distances = tuple(float(d[by_ids[pair][0], by_ids[pair][1]]) for pair in pairs)
    strata_out = None
    if strata is not None:
        strata_out = tuple(strata[by_ids[pair]] for pair in pairs)
    return PairingResult(
        pairs=pairs,
        distances=distances,
        total=float(sum(distances)),
        method=method,
        strata=strata_out,
        unmatched=tuple(sorted(unmatched)),
    )


def _optimal_index_pairs(d: np.ndarray) -> list:
    C = d.shape[0]
    if C == 0:
        return []
    if C == 2:
        return [(0, 1)]
    # blossom maximization on inverted weights = min-total perfect matching
    shift = float(d.max()) + 1.0
    graph = nx.Graph()
    graph.add_nodes_from(range(C))
    for i in range(C):
        for j in range(i + 1, C):
            graph.add_edge(i, j, weight=shift - float(d[i, j]))
    mate = nx.max_weight_matching(graph, maxcardinality=True)
    if 2 * len(mate) != C:
        raise MatchingError("matching solver failed to pair every cluster")
    return [tuple(sorted(e)) for e in mate]


def optimal_pairing(distances, cluster_ids: Optional[Sequence[int]] = None) -> PairingResult:
    """Exact minimum-total-distance perfect pairing."""
    d, ids = _check_distances(distances, cluster_ids)
    return _result_from_index_pairs(_optimal_index_pairs(d), d, ids, "optimal")


def greedy_pairing(distances, cluster_ids: Optional[Sequence[int]] = None) -> PairingResult:
    """Nearest-first pairing; ties go to the lowest cluster-id pair."""
    d, ids = _check_distances(distances, cluster_ids)
    C = d.shape[0]
    candidates = sorted(
        (float(d[i, j]),) + _ordered((i, j), ids) + (i, j)
        for i in range(C)
        for j in range(i + 1, C)
    )
    used = np.zeros(C, dtype=bool)
    picked = []
    for _, _, _, i, j in candidates:
        if used[i] or used[j]:
            continue
        used[i] = used[j] = True
        picked.append((i, j))
        if len(picked) * 2 == C:
            break
    return _result_from_index_pairs(picked, d, ids, "greedy")


def sturges_bins(n_clusters: int) -> int:
    if n_clusters < 1:
        raise MatchingError("need at least one cluster")
    return int(np.ceil(np.log2(max(n_clusters, 2)))) + 1


def _bin_signatures(x: np.ndarray, bins) -> tuple:
    C, p = x.shape
    if np.isscalar(bins):
        bins = [int(bins)] * p
    bins = [int(b) for b in bins]
    if len(bins) != p:
        raise MatchingError(f"need one bin count per covariate ({p}), got {len(bins)}")
    if any(b < 1 for b in bins):
        raise MatchingError("bin counts must be >= 1")
    signatures = np.empty((C, p), dtype=np.int64)
    widths = np.empty(p)
    for j, b in enumerate(bins):
        lo, hi = float(x[:, j].min()), float(x[:, j].max())
        if hi == lo:
            # constant column: everything shares one bin of zero spread
            signatures[:, j] = 0
            widths[j] = np.inf
            continue
        edges = np.linspace(lo, hi, b + 1)
        idx = np.clip(np.searchsorted(edges, x[:, j], side="right") - 1, 0, b - 1)
        signatures[:, j] = idx
        widths[j] = (hi - lo) / b
    return signatures, widths


def cem_pairing(
    cov,
    bins: Union[int, Sequence[int], None] = None,
    ridge: Optional[float] = None,
) -> PairingResult:
    """Coarsen each covariate into equal-width bins, pair only within strata.

    Clusters sharing a full bin signature form a stratum; inside each one
    the exact pairing runs on the raw Mahalanobis distances (computed once
    from the full input). Odd strata leave out the member whose removal
    leaves the cheapest pairing of the rest, ties to the lowest cluster id.
    bins accepts a single count or one per covariate; the default is
    Sturges' rule on the cluster count.
    """
    matrix = _as_matrix(cov)
    x = matrix.values
    ids = matrix.ids
    if bins is None:
        bins = sturges_bins(matrix.n_clusters)
    signatures, _ = _bin_signatures(x, bins)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        d = mahalanobis_matrix(matrix, ridge=ridge)

    strata: dict = {}
    for i in range(matrix.n_clusters):
        strata.setdefault(tuple(int(v) for v in signatures[i]), []).append(i)

    index_pairs = []
    stratum_of: dict = {}
    unmatched = []
    for signature in sorted(strata):
        members = strata[signature]
        if len(members) % 2 == 1:
            if len(members) == 1:
                unmatched.append(ids[members[0]])
                continue
            best = None
            for skip in members:
                rest = [m for m in members if m != skip]
                sub = d[np.ix_(rest, rest)]
                total = sum(
                    sub[i, j] for i, j in _optimal_index_pairs(sub)
                )
                key = (total, ids[skip])
                if best is None or key < best[0]:
                    best = (key, skip)
            unmatched.append(ids[best[1]])
            members = [m for m in members if m != best[1]]
        sub = d[np.ix_(members, members)]
        for i, j in _optimal_index_pairs(sub):
            pair = (members[i], members[j])
            index_pairs.append(pair)
            stratum_of[pair] = signature
    return _result_from_index_pairs(
        index_pairs, d, ids, "cem", strata=stratum_of, unmatched=unmatched
    )


def balance_report(cov, pairing: PairingResult) -> dict:
    """Per-covariate max and mean within-pair absolute difference."""
    matrix = _as_matrix(cov)
    index_of = {cid: i for i, cid in enumerate(matrix.ids)}
    if not pairing.pairs:
        raise MatchingError("pairing has no pairs to report on")
    diffs = []
    for a, b in pairing.pairs:
        if a not in index_of or b not in index_of:
            raise MatchingError(f"pair ({a}, {b}) names unknown cluster ids")
        diffs.append(np.abs(matrix.values[index_of[a]] - matrix.values[index_of[b]]))
    diffs = np.vstack(diffs)
    return {
        "max_abs_diff": diffs.max(axis=0),
        "mean_abs_diff": diffs.mean(axis=0),
    }


def read_covariate_csv(path) -> CovariateMatrix:
    """Read `cluster_id,cov1,...,covp` rows."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "cluster_id" or len(header) < 2:
            raise DataError("expected header cluster_id,cov1,...,covp")
        ids = []
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"row {lineno}: expected {len(header)} fields")
            try:
                ids.append(int(row[0]))
                rows.append([float(v) for v in row[1:]])
            except ValueError as exc:
                raise DataError(f"row {lineno}: {exc}") from None
    if not rows:
        raise DataError("covariate file has no data rows")
    return CovariateMatrix(np.array(rows, dtype=np.float64), ids=tuple(ids))


def write_pairing_csv(path, pairing: PairingResult) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["pair_id", "cluster_id_a", "cluster_id_b", "distance"])
        for k, ((a, b), dist) in enumerate(zip(pairing.pairs, pairing.distances), start=1):
            writer.writerow([k, a, b, repr(float(dist))])


def write_balance_csv(path, report: dict, names: Optional[Sequence[str]] = None) -> None:
    max_abs = np.asarray(report["max_abs_diff"])
    mean_abs = np.asarray(report["mean_abs_diff"])
    if names is None:
        names = [f"cov{j + 1}" for j in range(max_abs.size)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["covariate", "max_abs_diff", "mean_abs_diff"])
        for name, mx, mn in zip(names, max_abs, mean_abs):
            writer.writerow([name, repr(float(mx)), repr(float(mn))])
