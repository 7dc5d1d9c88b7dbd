"""Sweep-the-imbalance Monte Carlo harness.

A SimulationPlan fixes everything: base generator config, the sigma_delta
grid, the estimator set, iteration count and master seed. Every iteration
seed derives from (master seed, scenario id, grid index, iteration index),
estimation consumes no randomness, and aggregation always runs over arrays
indexed by iteration, so metrics are bit-identical across worker counts.

The per-replicate comparison target is the size-weighted sample average
effect over the replicate's clusters (the population version has no finite
moments under the inverse-mean effect, so a sample estimand is the only one
defined in every regime; all bias numbers are relative to it).
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import ExperimentData, PotentialOutcomeTable
from .dgp import (
    CovariateScenario,
    DgpConfig,
    RandomizationScheme,
    config_from_dict,
    config_to_dict,
    generate_experiment,
    validate_config,
)
from .errors import ConfigError, PairclustError, SimulationError
from . import estimators as _est

__all__ = [
    "ESTIMATOR_KEYS",
    "DEFAULT_GRID",
    "SimulationPlan",
    "MetricsRow",
    "METRICS_CSV_HEADER",
    "true_estimand",
    "run_cell",
    "run_sweep",
    "emit_figure",
    "write_metrics_csv",
    "read_metrics_csv",
    "plan_to_dict",
    "plan_from_dict",
    "load_plan",
    "write_plan",
    "scenario1_plan",
    "scenario2_plan",
]

ESTIMATOR_KEYS = ("design", "hier-nocov", "hier-cov", "pretest")
DEFAULT_GRID = tuple(i * 0.5 for i in range(11))
DEFAULT_ITERATIONS = 2000
DEFAULT_MASTER_SEED = 7

_COVARIATE_ESTIMATORS = frozenset({"hier-cov", "pretest"})
_ETA_TAG = 0xE7A
_MAX_FAIL_FRACTION = 0.10

METRICS_CSV_HEADER = [
    "scenario",
    "sigma_delta",
    "estimator",
    "bias",
    "bias_se",
    "rmse",
    "rmse_se",
    "coverage",
    "coverage_se",
    "n_iter",
    "n_fail",
]


@dataclass(frozen=True)
class SimulationPlan:
    """Complete, serializable description of one simulation study."""

    name: str
    scenario_id: int
    dgp: DgpConfig
    grid: tuple
    estimators: tuple = ("design", "hier-cov", "pretest")
    iterations: int = DEFAULT_ITERATIONS
    master_seed: int = DEFAULT_MASTER_SEED

    def materialized(self) -> "SimulationPlan":
        """Freeze the covariate disturbances into the plan.

        The nonlinear covariate constructions reuse one disturbance draw
        across all iterations, so the draw happens once here (derived from
        the master seed and scenario id) and rides along in the config.
        """
        needs_eta = self.dgp.scenario in (
            CovariateScenario.POST_TREATMENT_NONLINEAR,
            CovariateScenario.PRE_TREATMENT_NONLINEAR,
        )
        if not needs_eta or self.dgp.fixed_eta is not None:
            return self
        ss = np.random.SeedSequence([self.master_seed, self.scenario_id, _ETA_TAG])
        rng = np.random.Generator(np.random.PCG64(ss))
        eta = rng.normal(
            0.0, math.sqrt(self.dgp.eta_variance), size=(self.dgp.n_pairs, 2)
        )
        dgp = dataclasses.replace(
            self.dgp, fixed_eta=tuple(tuple(row) for row in eta.tolist())
        )
        return dataclasses.replace(self, dgp=dgp)


@dataclass(frozen=True)
class MetricsRow:
    scenario: int
    sigma_delta: float
    estimator: str
    bias: float
    bias_se: float
    rmse: float
    rmse_se: float
    coverage: float
    coverage_se: float
    n_iter: int
    n_fail: int


def validate_plan(plan: SimulationPlan) -> None:
    if not plan.grid:
        raise ConfigError("plan grid must contain at least one value")
    for v in plan.grid:
        if not (math.isfinite(v) and v >= 0):
            raise ConfigError(f"grid values must be finite and >= 0, got {v}")
    if plan.iterations < 1:
        raise ConfigError("iterations must be >= 1")
    if plan.master_seed < 0:
        raise ConfigError("master_seed must be >= 0")
    if not plan.estimators:
        raise ConfigError("plan needs at least one estimator")
    unknown = [e for e in plan.estimators if e not in ESTIMATOR_KEYS]
    if unknown:
        raise ConfigError(
            f"unknown estimators {unknown}; choose from {list(ESTIMATOR_KEYS)}"
        )
    if len(set(plan.estimators)) != len(plan.estimators):
        raise ConfigError("duplicate estimators in plan")
    needs_cov = [e for e in plan.estimators if e in _COVARIATE_ESTIMATORS]
    if needs_cov and plan.dgp.scenario is CovariateScenario.NONE:
        raise ConfigError(
            f"estimators {needs_cov} need a covariate scenario, plan has none"
        )
    validate_config(plan.dgp)


def true_estimand(truth: PotentialOutcomeTable, sizes) -> float:
    """Size-weighted sample average effect: sum n_jk tau_jk / sum n_jk."""
    n = np.asarray(sizes, dtype=np.float64)
    tau = np.asarray(truth.tau, dtype=np.float64)
    if n.shape != tau.shape:
        raise SimulationError("sizes and effects have mismatched shapes")
    return float((n * tau).sum() / n.sum())


def _estimate_one(key: str, data: ExperimentData):
    if key == "design":
        return _est.estimate_design_based(data)
    if key == "hier-nocov":
        return _est.fit_hier_nocov(data)[0]
    if key == "hier-cov":
        return _est.fit_hier_cov(data)[0]
    if key == "pretest":
        return _est.lr_pretest_estimate(data)
    raise ConfigError(f"unknown estimator {key!r}")


def _iteration_chunk(plan: SimulationPlan, grid_index: int, start: int, stop: int):
    """Run iterations [start, stop) of one grid point for every estimator.

    Returns {estimator: (errors, hits, fails)} as equal-length lists in
    iteration order; failed entries carry NaN/False placeholders.
    """
    sigma = float(plan.grid[grid_index])
    config = dataclasses.replace(plan.dgp, sigma_delta=sigma)
    out = {est: ([], [], []) for est in plan.estimators}
    for it in range(start, stop):
        ss = np.random.SeedSequence(
            [plan.master_seed, plan.scenario_id, grid_index, it]
        )
        data, truth = generate_experiment(config, seed_seq=ss)
        estimand = true_estimand(truth, data.sizes)
        for est in plan.estimators:
            errs, hits, fails = out[est]
            try:
                res = _estimate_one(est, data)
                ok = res.converged and math.isfinite(res.tau_hat)
            except (PairclustError, np.linalg.LinAlgError):
                res = None
                ok = False
            if ok:
                errs.append(res.tau_hat - estimand)
                hits.append(1.0 if res.covers(estimand) else 0.0)
                fails.append(False)
            else:
                errs.append(math.nan)
                hits.append(0.0)
                fails.append(True)
    return out


def _grid_point_arrays(plan: SimulationPlan, grid_index: int, workers: int, pool):
    """Full per-iteration arrays for one grid point, worker-count invariant."""
    n = plan.iterations
    err = {est: np.full(n, math.nan) for est in plan.estimators}
    hit = {est: np.zeros(n) for est in plan.estimators}
    fail = {est: np.ones(n, dtype=bool) for est in plan.estimators}

    if pool is None:
        pieces = [((0, n), _iteration_chunk(plan, grid_index, 0, n))]
    else:
        chunk = max(1, math.ceil(n / (workers * 4)))
        spans = [(s, min(s + chunk, n)) for s in range(0, n, chunk)]
        futures = [
            (span, pool.submit(_iteration_chunk, plan, grid_index, *span))
            for span in spans
        ]
        pieces = [(span, f.result()) for span, f in futures]

    for (start, stop), res in pieces:
        for est in plan.estimators:
            errs, hits, fails = res[est]
            err[est][start:stop] = errs
            hit[est][start:stop] = hits
            fail[est][start:stop] = fails
    return err, hit, fail


def _metrics_row(plan, sigma: float, est: str, err, hit, fail) -> MetricsRow:
    n = plan.iterations
    n_fail = int(fail.sum())
    if n_fail > _MAX_FAIL_FRACTION * n:
        raise SimulationError(
            f"scenario {plan.scenario_id}, estimator {est}, sigma_delta {sigma}: "
            f"{n_fail} of {n} iterations failed (> {_MAX_FAIL_FRACTION:.0%})"
        )
    valid = ~fail
    e = err[valid]
    h = hit[valid]
    m = e.size
    bias = float(e.mean())
    sq = e * e
    rmse = float(math.sqrt(sq.mean()))
    if m > 1:
        bias_se = float(e.std(ddof=1) / math.sqrt(m))
        rmse_se = (
            float(sq.std(ddof=1) / (2.0 * rmse * math.sqrt(m))) if rmse > 0 else 0.0
        )
    else:
        bias_se = math.nan
        rmse_se = math.nan
    coverage = float(h.mean())
    coverage_se = float(math.sqrt(coverage * (1.0 - coverage) / m))
    return MetricsRow(
        scenario=plan.scenario_id,
        sigma_delta=float(sigma),
        estimator=est,
        bias=bias,
        bias_se=bias_se,
        rmse=rmse,
        rmse_se=rmse_se,
        coverage=coverage,
        coverage_se=coverage_se,
        n_iter=int(m),
        n_fail=n_fail,
    )


def run_cell(plan: SimulationPlan, sigma_delta: float, estimator: str) -> MetricsRow:
    """One (grid value, estimator) cell, reproducing the sweep's row exactly.

    sigma_delta must be one of the plan's grid values because the iteration
    seeds are derived from the grid position.
    """
    plan = plan.materialized()
    validate_plan(plan)
    if estimator not in plan.estimators:
        raise ConfigError(f"estimator {estimator!r} is not part of the plan")
    try:
        grid_index = plan.grid.index(sigma_delta)
    except ValueError:
        raise ConfigError(
            f"sigma_delta {sigma_delta} is not on the plan grid {list(plan.grid)}"
        ) from None
    single = dataclasses.replace(plan, estimators=(estimator,))
    err, hit, fail = _grid_point_arrays(single, grid_index, 1, None)
    return _metrics_row(
        single, plan.grid[grid_index], estimator,
        err[estimator], hit[estimator], fail[estimator],
    )


def run_sweep(plan: SimulationPlan, workers: int = 1) -> list:
    """All cells of the plan; rows sorted by (scenario, estimator, sigma).

    workers > 1 forks processes and splits iterations across them; results
    are placed back in iteration order before any reduction, so the numbers
    do not depend on the worker count.
    """
    plan = plan.materialized()
    validate_plan(plan)
    workers = max(1, int(workers))

    pool = None
    rows = []
    try:
        if workers > 1:
            pool = ProcessPoolExecutor(
                max_workers=workers, mp_context=multiprocessing.get_context("fork")
            )
        for grid_index, sigma in enumerate(plan.grid):
            err, hit, fail = _grid_point_arrays(plan, grid_index, workers, pool)
            for est in plan.estimators:
                rows.append(
                    _metrics_row(plan, sigma, est, err[est], hit[est], fail[est])
                )
    finally:
        if pool is not None:
            pool.shutdown()
    rows.sort(key=lambda r: (r.scenario, r.estimator, r.sigma_delta))
    return rows


def write_metrics_csv(rows: Sequence[MetricsRow], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_CSV_HEADER)
        for r in rows:
            writer.writerow(
                [
                    r.scenario,
                    repr(float(r.sigma_delta)),
                    r.estimator,
                    repr(float(r.bias)),
                    repr(float(r.bias_se)),
                    repr(float(r.rmse)),
                    repr(float(r.rmse_se)),
                    repr(float(r.coverage)),
                    repr(float(r.coverage_se)),
                    r.n_iter,
                    r.n_fail,
                ]
            )


def read_metrics_csv(path) -> list:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != METRICS_CSV_HEADER:
            raise SimulationError(f"unexpected metrics header {reader.fieldnames}")
        for rec in reader:
            rows.append(
                MetricsRow(
                    scenario=int(rec["scenario"]),
                    sigma_delta=float(rec["sigma_delta"]),
                    estimator=rec["estimator"],
                    bias=float(rec["bias"]),
                    bias_se=float(rec["bias_se"]),
                    rmse=float(rec["rmse"]),
                    rmse_se=float(rec["rmse_se"]),
                    coverage=float(rec["coverage"]),
                    coverage_se=float(rec["coverage_se"]),
                    n_iter=int(rec["n_iter"]),
                    n_fail=int(rec["n_fail"]),
                )
            )
    return rows


_LINE_STYLES = {
    "design": ("solid", "design-based"),
    "hier-cov": ("dashed", "model-based (covariate)"),
    "pretest": ("dotted", "pre-test"),
    "hier-nocov": ("dashdot", "model-based (no covariate)"),
}
_METRIC_PANELS = (("bias", "Bias"), ("rmse", "RMSE"), ("coverage", "Coverage"))


def emit_figure(rows: Sequence[MetricsRow], path, csv_path=None) -> None:
    """Three metric rows by one column per scenario, plus the tidy CSV.

    Solid line for the design-based estimator, dashed for the model with a
    covariate, dotted for the pre-test, dash-dot for the covariate-free
    model; the coverage panels carry a 0.95 reference line. Output is
    deterministic (fixed hash salt, no embedded timestamps).
    """
    if not rows:
        raise SimulationError("no metrics rows to plot")
    import matplotlib
    from matplotlib.figure import Figure
    from matplotlib.backends.backend_svg import FigureCanvasSVG

    if csv_path is None:
        csv_path = str(path).rsplit(".", 1)[0] + ".csv"
    write_metrics_csv(rows, csv_path)

    scenarios = sorted({r.scenario for r in rows})
    fig = Figure(figsize=(4.6 * len(scenarios), 10.5), dpi=100)
    FigureCanvasSVG(fig)
    axes = fig.subplots(3, len(scenarios), squeeze=False, sharex="col")
    for col, scenario in enumerate(scenarios):
        in_scenario = [r for r in rows if r.scenario == scenario]
        ests = [e for e in _LINE_STYLES if any(r.estimator == e for r in in_scenario)]
        for panel, (metric, label) in enumerate(_METRIC_PANELS):
            ax = axes[panel][col]
            for est in ests:
                pts = sorted(
                    (r for r in in_scenario if r.estimator == est),
                    key=lambda r: r.sigma_delta,
                )
                style, legend = _LINE_STYLES[est]
                ax.plot(
                    [r.sigma_delta for r in pts],
                    [getattr(r, metric) for r in pts],
                    color="black",
                    linestyle=style,
                    label=legend,
                )
            if metric == "bias":
                ax.axhline(0.0, color="0.7", linewidth=0.8, zorder=0)
                ax.set_title(f"Scenario {scenario}")
            if metric == "coverage":
                ax.axhline(0.95, color="0.7", linewidth=0.8, zorder=0)
                ax.set_ylim(0.0, 1.02)
                ax.set_xlabel("standard deviation of added imbalance")
            if col == 0:
                ax.set_ylabel(label)
            if panel == 0 and col == 0:
                ax.legend(fontsize=8, frameon=False)
    fig.subplots_adjust(hspace=0.25, wspace=0.25)
    with matplotlib.rc_context({"svg.hashsalt": "pairclust", "svg.fonttype": "path"}):
        fig.savefig(path, format="svg", metadata={"Date": None})


def plan_to_dict(plan: SimulationPlan) -> dict:
    return {
        "name": plan.name,
        "scenario_id": plan.scenario_id,
        "dgp": config_to_dict(plan.dgp),
        "grid": [float(v) for v in plan.grid],
        "estimators": list(plan.estimators),
        "iterations": plan.iterations,
        "master_seed": plan.master_seed,
    }


def plan_from_dict(payload: dict) -> SimulationPlan:
    if not isinstance(payload, dict):
        raise ConfigError("plan must be a JSON object")
    known = {
        "name", "scenario_id", "dgp", "grid", "estimators",
        "iterations", "master_seed",
    }
    unknown = set(payload) - known
    if unknown:
        raise ConfigError(f"unknown plan keys: {sorted(unknown)}")
    missing = {"name", "scenario_id", "dgp", "grid"} - set(payload)
    if missing:
        raise ConfigError(f"plan is missing keys: {sorted(missing)}")
    plan = SimulationPlan(
        name=str(payload["name"]),
        scenario_id=int(payload["scenario_id"]),
        dgp=config_from_dict(payload["dgp"]),
        grid=tuple(float(v) for v in payload["grid"]),
        estimators=tuple(payload.get("estimators", ("design", "hier-cov", "pretest"))),
        iterations=int(payload.get("iterations", DEFAULT_ITERATIONS)),
        master_seed=int(payload.get("master_seed", DEFAULT_MASTER_SEED)),
    )
    validate_plan(plan)
    return plan


def load_plan(path) -> SimulationPlan:
    with open(path) as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return plan_from_dict(payload)


def write_plan(plan: SimulationPlan, path) -> None:
    with open(path, "w") as fh:
        json.dump(plan_to_dict(plan), fh, indent=2)
        fh.write("\n")


def scenario1_plan(
    iterations: int = DEFAULT_ITERATIONS,
    master_seed: int = DEFAULT_MASTER_SEED,
    grid: tuple = DEFAULT_GRID,
) -> SimulationPlan:
    """Post-treatment covariate study: 50 pairs, mean cluster size 50.

    The baseline-mean parameters are calibrated so the log/exp covariate
    stays informative at small within-pair imbalance: there the adjusted
    estimator is badly biased and its intervals undercover, while the
    weighted pair-difference estimator stays unbiased with near-nominal
    coverage.  At large imbalance the exp-transformed covariate column is
    dominated by a single extreme cluster, the fitted slope collapses
    toward zero, and the adjusted estimator's bias shrinks again.
    """
    dgp = DgpConfig(
        n_pairs=50,
        mean_cluster_size=50.0,
        mu0=3.5,
        sigma0=0.45,
        sigma_eps=1.0,
        scenario=CovariateScenario.POST_TREATMENT_NONLINEAR,
        randomization=RandomizationScheme.PROPER_PAIR,
    )
    return SimulationPlan(
        name="post-treatment covariate",
        scenario_id=1,
        dgp=dgp,
        grid=tuple(grid),
        iterations=iterations,
        master_seed=master_seed,
    )


def scenario2_plan(
    iterations: int = DEFAULT_ITERATIONS,
    master_seed: int = DEFAULT_MASTER_SEED,
    grid: tuple = DEFAULT_GRID,
) -> SimulationPlan:
    """Pre-treatment covariate study: 10 pairs, mean cluster size 15.

    The baseline-mean parameters are calibrated so both covariate columns
    carry almost no usable signal (the exp column is dominated by one
    extreme cluster tied to the baseline level rather than to the
    within-pair imbalance, and the log column is buried in covariate
    noise).  All three estimators are then unbiased; the adjusted model
    pays a variance price for fitting the useless column, and with only
    ten pairs its maximum-likelihood intervals run somewhat too narrow,
    while inverse-effect heterogeneity keeps the conservative weighted
    pair-difference intervals near nominal across the sweep.
    """
    dgp = DgpConfig(
        n_pairs=10,
        mean_cluster_size=15.0,
        mu0=15.0,
        sigma0=8.0,
        sigma_eps=6.5,
        scenario=CovariateScenario.PRE_TREATMENT_NONLINEAR,
        randomization=RandomizationScheme.PROPER_PAIR,
    )
    return SimulationPlan(
        name="pre-treatment covariate",
        scenario_id=2,
        dgp=dgp,
        grid=tuple(grid),
        iterations=iterations,
        master_seed=master_seed,
    )
