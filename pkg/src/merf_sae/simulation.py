"""Monte-Carlo evaluation of area-mean estimators.

Two protocols share one replication kernel:

* model-based: every replication draws a fresh population from a
  :class:`~merf_sae.scenarios.ScenarioSpec` and a fresh stratified sample;
* design-based: one fixed census (with response) is resampled ``T`` times
  following a per-area sample-size pattern; areas with ``n_i = 0`` stay
  out of sample.

Methods are ``"merf"`` (forest fixed part), ``"linear_baseline"`` (the same
alternation with a least-squares fixed part, i.e. the classical unit-level
linear mixed model) and ``"direct"`` (sample means; in-sample areas only).

All random streams are keyed by (root seed, replication, purpose, method),
so results do not depend on ``n_jobs`` or on which methods are selected.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from ._rng import STREAM_SIM, substream_seed
from .bootstrap import RebConfig, bootstrap_mse
from .data import CensusDataset, SurveyDataset, align
from .estimate import area_means, estimate_means
from .exceptions import ConfigError, MerfError
from .merf import LinearLearner, MerfConfig, fit_merf
from .scenarios import ScenarioSpec, canonical_n_vector, draw_sample, generate_population

logger = logging.getLogger(__name__)

METHODS = ("merf", "linear_baseline", "direct")
# fixed codes keep each method's seed independent of the selection
_METHOD_CODE = {name: k for k, name in enumerate(METHODS)}

RECORD_COLUMNS = ["replication", "method", "area", "in_sample", "n_i", "estimate", "truth",
                  "mse_hat"]
METRICS = ["RB", "RRMSE", "RB_RMSE", "RRMSE_RMSE"]


@dataclass(frozen=True)
class SimConfig:
    """Settings shared by all replications.

    ``reb`` switches on the inner bootstrap MSE for the model-based methods
    (its ``seed`` is replaced per replication). Without it the fits skip the
    residual-variance bias correction, which point estimates do not use.
    """

    merf: MerfConfig = field(default_factory=MerfConfig)
    reb: RebConfig | None = None
    n_jobs: int = 1

    def __post_init__(self):
        if self.n_jobs < 1:
            raise ConfigError("n_jobs must be positive")


@dataclass
class SimResult:
    """Tidy per-(replication, method, area) records plus fit diagnostics.

    ``fits`` has one row per (replication, method) with the convergence
    flag, iteration count, variance components and bootstrap failures.
    ``failures`` counts replications excluded per method.
    """

    records: pd.DataFrame
    fits: pd.DataFrame
    methods: tuple[str, ...]
    n_replications: int
    area_order: list[str]
    failures: dict[str, int]
    metadata: dict = field(default_factory=dict)

    def to_csv(self, path) -> None:
        self.records.to_csv(path, index=False, float_format="%.17g")

    def convergence_rate(self, method: str = "merf") -> float:
        rows = self.fits[self.fits["method"] == method]
        return float(rows["converged"].mean()) if len(rows) else math.nan


@dataclass
class MetricTable:
    """Per-area metrics (percent, except ``RMSE_emp``/``RMSE_est`` in units
    of y) and their mean/median over all, in-sample and out-of-sample areas."""

    areas: pd.DataFrame
    summary: pd.DataFrame

    def value(self, method: str, metric: str, statistic: str = "mean",
              subset: str = "all") -> float:
        s = self.summary
        row = s[(s["method"] == method) & (s["statistic"] == statistic) & (s["subset"] == subset)]
        if row.empty:
            raise KeyError(f"no summary for {method}/{statistic}/{subset}")
        return float(row[metric].iloc[0])

    def to_csv(self, path) -> None:
        frame = pd.concat([self.areas.assign(statistic="area"),
                           self.summary.assign(area=np.nan)], ignore_index=True)
        frame.to_csv(path, index=False, float_format="%.17g")


def _check_methods(methods) -> tuple[str, ...]:
    methods = tuple(methods)
    if not methods:
        raise ConfigError("select at least one method")
    unknown = [m for m in methods if m not in _METHOD_CODE]
    if unknown:
        raise ConfigError(f"unknown methods {unknown}; choose from {list(METHODS)}")
    return methods


def _direct(survey: SurveyDataset, index) -> np.ndarray:
    pos = index.position()
    codes = np.array([pos[a] for a in survey.area], dtype=np.intp)
    out = np.full(index.D, np.nan)
    with np.errstate(invalid="ignore", divide="ignore"):
        means = area_means(survey.y, codes, index.D)
    out[index.in_sample] = means[index.in_sample]
    return out


def _fit_method(method, survey, population, index, config: SimConfig, seed, replication):
    """Estimates (and optional MSEs) of one method in one replication."""
    code = _METHOD_CODE[method]
    info = {"replication": replication, "method": method, "converged": np.nan,
            "n_iter": np.nan, "sigma2_v": np.nan, "sigma2_eps": np.nan,
            "sigma2_bc": np.nan, "boot_failed": 0}
    if method == "direct":
        return _direct(survey, index), None, info
    learner = LinearLearner() if method == "linear_baseline" else None
    merf_config = replace(config.merf, seed=substream_seed(seed, STREAM_SIM, replication, 2, code))
    with_mse = config.reb is not None
    model = fit_merf(survey, learner, merf_config, correct_bias=with_mse)
    estimates = estimate_means(model, population, index)
    info.update(converged=model.converged, n_iter=model.trace.n_iter,
                sigma2_v=model.vc.sigma2_v, sigma2_eps=model.vc.sigma2_eps,
                sigma2_bc=model.vc.sigma2_bc if model.vc.sigma2_bc is not None else np.nan)
    mse = None
    if with_mse:
        reb = replace(config.reb, seed=substream_seed(seed, STREAM_SIM, replication, 3, code))
        boot = bootstrap_mse(model, survey, population, index, reb)
        mse = boot.mse_hat
        info["boot_failed"] = boot.n_failed
    return estimates.mu_hat, mse, info


def _replicate(population: CensusDataset, survey: SurveyDataset, truth: np.ndarray,
               methods, config: SimConfig, seed: int, replication: int):
    index = align(survey, population)
    records, fits, failed = [], [], []
    for method in methods:
        try:
            est, mse, info = _fit_method(method, survey, population, index, config, seed,
                                         replication)
        except (MerfError, np.linalg.LinAlgError, FloatingPointError) as exc:
            logger.warning("replication %d, method %s failed: %s", replication, method, exc)
            failed.append(method)
            continue
        fits.append(info)
        records.append(pd.DataFrame({
            "replication": replication, "method": method, "area": index.labels,
            "in_sample": index.in_sample, "n_i": index.n_i, "estimate": est,
            "truth": truth, "mse_hat": mse if mse is not None else np.nan,
        }))
    return records, fits, failed, list(index.labels)


def _collect(results, methods, n_rep, metadata) -> SimResult:
    records, fits = [], []
    failures = {m: 0 for m in methods}
    order = None
    for rec, fit, failed, labels in results:
        records.extend(rec)
        fits.extend(fit)
        for m in failed:
            failures[m] += 1
        order = labels if order is None else order
    frame = (pd.concat(records, ignore_index=True) if records
             else pd.DataFrame(columns=RECORD_COLUMNS))
    fit_frame = pd.DataFrame(fits, columns=["replication", "method", "converged", "n_iter",
                                            "sigma2_v", "sigma2_eps", "sigma2_bc",
                                            "boot_failed"])
    return SimResult(records=frame[RECORD_COLUMNS], fits=fit_frame, methods=methods,
                     n_replications=n_rep, area_order=order or [], failures=failures,
                     metadata=metadata)


def _map(fn, n, n_jobs):
    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            return list(pool.map(fn, range(n)))
    return [fn(r) for r in range(n)]


def _metadata(config: SimConfig, seed, **extra) -> dict:
    reb = config.reb
    meta = {"seed": int(seed), "tolerance": config.merf.tolerance,
            "max_iter": config.merf.max_iter, "forest": vars(config.merf.forest).copy(),
            "bias_correction_B": config.merf.bias_correction_B,
            "reb_B": reb.B if reb else None,
            "reb_refit_forest": vars(reb.refit_forest).copy() if reb and reb.refit_forest
            else None}
    meta.update(extra)
    return meta


def run_model_based(spec: ScenarioSpec, M: int, methods=("merf", "linear_baseline"),
                    config: SimConfig = SimConfig(), seed: int = 0,
                    n_vector=None) -> SimResult:
    """``M`` independent (population, sample) replications of ``spec``.

    ``n_vector`` defaults to the canonical per-area sample sizes.
    """
    if M < 1:
        raise ConfigError("M must be positive")
    methods = _check_methods(methods)
    n_vector = canonical_n_vector() if n_vector is None else n_vector

    def one(r):
        population = generate_population(spec, substream_seed(seed, STREAM_SIM, r, 0))
        survey, _ = draw_sample(population, n_vector, substream_seed(seed, STREAM_SIM, r, 1))
        truth = population.area_means()
        return _replicate(population, survey, truth, methods, config, seed, r)

    results = _map(one, M, config.n_jobs)
    return _collect(results, methods, M,
                    _metadata(config, seed, mode="model-based", scenario=spec.name, M=M))


def run_design_based(census: CensusDataset, pattern, T: int,
                     methods=("merf", "linear_baseline"), config: SimConfig = SimConfig(),
                     seed: int = 0) -> SimResult:
    """``T`` stratified samples from one fixed census following ``pattern``
    (per-area ``n_i``, zero for out-of-sample areas, as a sequence in census
    area order or a label -> n_i mapping). True values are the census area
    means of the response."""
    if T < 1:
        raise ConfigError("T must be positive")
    if census.y is None:
        raise ConfigError("design-based simulation needs a census with response")
    methods = _check_methods(methods)
    truth = census.area_means()
    # validates the pattern once before any work is done
    draw_sample(census, pattern, substream_seed(seed, STREAM_SIM, 0, 1))

    def one(r):
        survey, _ = draw_sample(census, pattern, substream_seed(seed, STREAM_SIM, r, 1))
        return _replicate(census, survey, truth, methods, config, seed, r)

    results = _map(one, T, config.n_jobs)
    return _collect(results, methods, T, _metadata(config, seed, mode="design-based", T=T))


def _area_metrics(est, truth, mse) -> dict:
    err = est - truth
    rmse_emp = math.sqrt(np.mean(err ** 2))
    out = {"M": est.size,
           "RB": 100 * np.mean(err / truth),
           "RRMSE": 100 * rmse_emp / np.mean(truth),
           "RMSE_emp": rmse_emp,
           "RMSE_est": np.nan, "RB_RMSE": np.nan, "RRMSE_RMSE": np.nan}
    if np.all(np.isfinite(mse)):
        root = np.sqrt(mse)
        out["RMSE_est"] = math.sqrt(np.mean(mse))
        if rmse_emp > 0:
            out["RB_RMSE"] = 100 * (out["RMSE_est"] - rmse_emp) / rmse_emp
            out["RRMSE_RMSE"] = 100 * math.sqrt(np.mean((root - rmse_emp) ** 2)) / rmse_emp
    return out


def compute_metrics(result: SimResult) -> MetricTable:
    """RB, RRMSE, RB-RMSE and RRMSE-RMSE per method and area.

    Areas whose true mean is zero in some replication (or without estimates,
    e.g. out-of-sample areas of the direct estimator) get missing metrics.
    """
    rows = []
    frame = result.records
    for (method, area), grp in frame.groupby(["method", "area"], sort=False):
        est = grp["estimate"].to_numpy(dtype=np.float64)
        truth = grp["truth"].to_numpy(dtype=np.float64)
        mse = grp["mse_hat"].to_numpy(dtype=np.float64)
        base = {"method": method, "area": area, "in_sample": bool(grp["in_sample"].iloc[0]),
                "n_i": int(grp["n_i"].iloc[0])}
        if np.any(truth == 0):
            logger.warning("true mean of area %s is zero; metrics undefined", area)
            rows.append({**base, "M": est.size})
            continue
        if not np.all(np.isfinite(est)):
            rows.append({**base, "M": est.size})
            continue
        rows.append({**base, **_area_metrics(est, truth, mse)})
    cols = ["method", "area", "in_sample", "n_i", "M", *METRICS, "RMSE_emp", "RMSE_est"]
    areas = pd.DataFrame(rows).reindex(columns=cols)
    summary = []
    for method in result.methods:
        part = areas[areas["method"] == method]
        for subset, mask in (("all", np.ones(len(part), bool)),
                             ("in_sample", part["in_sample"].to_numpy(bool)),
                             ("out_of_sample", ~part["in_sample"].to_numpy(bool))):
            sel = part[mask]
            if sel.empty:
                continue
            for stat in ("mean", "median"):
                values = {m: float(getattr(sel[m], stat)()) if sel[m].notna().any() else np.nan
                          for m in METRICS}
                summary.append({"method": method, "subset": subset, "statistic": stat,
                                "n_areas": len(sel), **values})
    return MetricTable(areas=areas, summary=pd.DataFrame(summary))
