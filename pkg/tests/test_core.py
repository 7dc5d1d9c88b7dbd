"""Data container invariants, interval helpers, and CSV round trips."""

import math

import numpy as np
import pytest
from scipy.stats import norm

from pairclust.core import (
    EstimateResult,
    ExperimentData,
    PotentialOutcomeTable,
    observed_from_potential,
    read_experiment_csv,
    validate,
    wald_interval,
    write_experiment_csv,
)
from pairclust.errors import DataError

from conftest import synth_dataset


def small_data():
    return ExperimentData(
        treatment=[[0, 1], [1, 0]],
        sizes=[[2, 1], [1, 3]],
        outcomes=[1.0, 3.0, 5.0, 7.0, 2.0, 4.0, 6.0],
        covariate=[[0.5, -0.5], [1.5, 2.5]],
    )


def test_arrays_coerced_and_frozen():
    data = small_data()
    assert data.treatment.dtype == np.int64
    assert data.sizes.dtype == np.int64
    assert data.outcomes.dtype == np.float64
    assert data.covariate.dtype == np.float64
    for arr in (data.treatment, data.sizes, data.outcomes, data.covariate):
        with pytest.raises(ValueError):
            arr[0] = 0


def test_summary_properties_match_hand_loops():
    data = small_data()
    assert data.n_pairs == 2
    assert data.n_total == 7
    # offsets: cumulative starts of [2, 1, 1, 3]
    assert data.offsets.tolist() == [[0, 2], [3, 4]]
    means = data.cluster_means
    assert means[0, 0] == pytest.approx((1.0 + 3.0) / 2)
    assert means[0, 1] == pytest.approx(5.0)
    assert means[1, 0] == pytest.approx(7.0)
    assert means[1, 1] == pytest.approx((2.0 + 4.0 + 6.0) / 3)
    ss = data.cluster_ss
    assert ss[0, 0] == pytest.approx((1.0 - 2.0) ** 2 + (3.0 - 2.0) ** 2)
    assert ss[0, 1] == 0.0
    assert ss[1, 0] == 0.0
    assert ss[1, 1] == pytest.approx(8.0)


def test_shape_validation_raises():
    with pytest.raises(DataError):
        ExperimentData(treatment=[[0, 1, 0]], sizes=[[1, 1, 1]], outcomes=[1.0, 2.0, 3.0])
    with pytest.raises(DataError):
        ExperimentData(treatment=[[0, 1]], sizes=[[1, 1], [2, 2]], outcomes=[1.0, 2.0])
    with pytest.raises(DataError):
        ExperimentData(treatment=[[0, 1]], sizes=[[1, 1]], outcomes=[[1.0], [2.0]])
    with pytest.raises(DataError):
        ExperimentData(
            treatment=[[0, 1]], sizes=[[1, 1]], outcomes=[1.0, 2.0], covariate=[[1.0, 2.0], [3.0, 4.0]]
        )


def test_validate_reports_each_violation():
    assert validate(small_data()) == []

    both_treated = ExperimentData(
        treatment=[[1, 1]], sizes=[[1, 1]], outcomes=[1.0, 2.0]
    )
    msgs = validate(both_treated)
    assert any("exactly one treated" in m for m in msgs)

    bad_entry = ExperimentData(treatment=[[2, 0]], sizes=[[1, 1]], outcomes=[1.0, 2.0])
    msgs = validate(bad_entry)
    assert any("0 or 1" in m for m in msgs)

    zero_size = ExperimentData(treatment=[[0, 1]], sizes=[[0, 2]], outcomes=[1.0, 2.0])
    msgs = validate(zero_size)
    assert any("size < 1" in m for m in msgs)

    length_mismatch = ExperimentData(
        treatment=[[0, 1]], sizes=[[2, 2]], outcomes=[1.0, 2.0]
    )
    msgs = validate(length_mismatch)
    assert any("length mismatch" in m for m in msgs)

    non_finite = ExperimentData(
        treatment=[[0, 1]], sizes=[[1, 1]], outcomes=[1.0, math.inf]
    )
    msgs = validate(non_finite)
    assert any("non-finite" in m for m in msgs)

    bad_cov = ExperimentData(
        treatment=[[0, 1]],
        sizes=[[1, 1]],
        outcomes=[1.0, 2.0],
        covariate=[[math.nan, 0.0]],
    )
    msgs = validate(bad_cov)
    assert any("covariate" in m for m in msgs)


def test_wald_interval_matches_normal_quantile():
    lo, hi = wald_interval(2.0, 0.5, 0.95)
    z = norm.ppf(0.975)
    assert lo == pytest.approx(2.0 - z * 0.5, abs=1e-12)
    assert hi == pytest.approx(2.0 + z * 0.5, abs=1e-12)
    lo80, hi80 = wald_interval(0.0, 1.0, 0.80)
    assert hi80 == pytest.approx(norm.ppf(0.90), abs=1e-12)
    assert lo80 == -hi80
    assert all(math.isnan(v) for v in wald_interval(1.0, math.nan, 0.95))
    assert all(math.isnan(v) for v in wald_interval(1.0, math.inf, 0.95))


def test_covers_is_inclusive():
    res = EstimateResult(
        estimator="x", tau_hat=1.0, se=0.5, ci_lo=0.0, ci_hi=2.0
    )
    assert res.covers(0.0) and res.covers(2.0) and res.covers(1.3)
    assert not res.covers(-0.001) and not res.covers(2.001)


def test_observed_from_potential_selects_columns():
    table = PotentialOutcomeTable(
        y0_mean=[[1.0, 2.0], [3.0, 4.0]],
        y1_mean=[[11.0, 12.0], [13.0, 14.0]],
        tau=[[10.0, 10.0], [10.0, 10.0]],
        delta=[1.0, 1.0],
        sizes=[[1, 2], [1, 1]],
        y0=[1.0, 2.0, 2.5, 3.0, 4.0],
        y1=[11.0, 12.0, 12.5, 13.0, 14.0],
    )
    data = observed_from_potential(table, [[0, 1], [1, 0]])
    # pair 1: control position 1 (y0), treated position 2 (y1)
    assert data.outcomes.tolist() == [1.0, 12.0, 12.5, 13.0, 4.0]
    assert data.covariate is None

    cov = [[0.1, 0.2], [0.3, 0.4]]
    with_cov = observed_from_potential(table, [[0, 1], [1, 0]], covariate=cov)
    assert with_cov.covariate.tolist() == cov

    with pytest.raises(DataError):
        observed_from_potential(table, [[0, 1]])

    cluster_only = PotentialOutcomeTable(
        y0_mean=[[1.0, 2.0]], y1_mean=[[2.0, 3.0]], tau=[[1.0, 1.0]], delta=[1.0]
    )
    with pytest.raises(DataError):
        observed_from_potential(cluster_only, [[0, 1]])


def test_potential_table_shape_checks():
    with pytest.raises(DataError):
        PotentialOutcomeTable(
            y0_mean=[1.0, 2.0], y1_mean=[2.0, 3.0], tau=[1.0, 1.0], delta=[1.0]
        )
    with pytest.raises(DataError):
        PotentialOutcomeTable(
            y0_mean=[[1.0, 2.0]],
            y1_mean=[[2.0, 3.0]],
            tau=[[1.0, 1.0]],
            delta=[1.0, 2.0],
        )


def test_experiment_csv_round_trip_exact(tmp_path, rng):
    for covariate in (None, rng.normal(size=(4, 2))):
        data = synth_dataset(
            rng, 4, rng.integers(1, 6, size=(4, 2)), effect=1.5, covariate=covariate
        )
        path = tmp_path / ("with_cov.csv" if covariate is not None else "no_cov.csv")
        write_experiment_csv(data, path)
        back = read_experiment_csv(path)
        assert back.treatment.tolist() == data.treatment.tolist()
        assert back.sizes.tolist() == data.sizes.tolist()
        # repr round-trips doubles exactly
        assert np.array_equal(back.outcomes, data.outcomes)
        if covariate is None:
            assert back.covariate is None
        else:
            assert np.array_equal(back.covariate, data.covariate)


def _write_lines(path, lines):
    path.write_text("\n".join(lines) + "\n")
    return path


def test_read_experiment_csv_rejects_malformed(tmp_path):
    header = "pair_id,cluster_id,treatment,size,covariate,outcome"

    bad_header = _write_lines(tmp_path / "h.csv", ["a,b,c", "1,1,0,1,,1.0"])
    with pytest.raises(DataError, match="header"):
        read_experiment_csv(bad_header)

    bad_cell = _write_lines(tmp_path / "cell.csv", [header, "1,1,zero,1,,1.0"])
    with pytest.raises(DataError, match=r":2:"):
        read_experiment_csv(bad_cell)

    bad_position = _write_lines(tmp_path / "pos.csv", [header, "1,3,0,1,,1.0"])
    with pytest.raises(DataError, match="cluster_id"):
        read_experiment_csv(bad_position)

    meta_changes = _write_lines(
        tmp_path / "meta.csv",
        [header, "1,1,0,2,,1.0", "1,1,1,2,,2.0", "1,2,1,1,,3.0"],
    )
    with pytest.raises(DataError, match="change within cluster"):
        read_experiment_csv(meta_changes)

    not_contiguous = _write_lines(
        tmp_path / "contig.csv",
        [header, "1,1,0,2,,1.0", "1,2,1,1,,3.0", "1,1,0,2,,2.0"],
    )
    with pytest.raises(DataError, match="contiguous"):
        read_experiment_csv(not_contiguous)

    bad_pair_ids = _write_lines(
        tmp_path / "ids.csv",
        [header, "2,1,0,1,,1.0", "2,2,1,1,,2.0"],
    )
    with pytest.raises(DataError, match="1..K"):
        read_experiment_csv(bad_pair_ids)

    missing_cluster = _write_lines(
        tmp_path / "miss.csv", [header, "1,1,0,1,,1.0"]
    )
    with pytest.raises(DataError, match="missing cluster"):
        read_experiment_csv(missing_cluster)

    size_mismatch = _write_lines(
        tmp_path / "size.csv",
        [header, "1,1,0,2,,1.0", "1,2,1,1,,3.0"],
    )
    with pytest.raises(DataError, match="declares size"):
        read_experiment_csv(size_mismatch)

    partial_cov = _write_lines(
        tmp_path / "cov.csv",
        [header, "1,1,0,1,0.5,1.0", "1,2,1,1,,3.0"],
    )
    with pytest.raises(DataError, match="all clusters or none"):
        read_experiment_csv(partial_cov)

    empty = _write_lines(tmp_path / "empty.csv", [header])
    with pytest.raises(DataError, match="no data rows"):
        read_experiment_csv(empty)
