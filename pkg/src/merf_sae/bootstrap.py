"""Random-effect block bootstrap for the MSE of area means.

Marginal residuals are split into area-level (level 2) and unit-level
(level 1) parts, rescaled to the estimated variance components and
resampled to synthesize bootstrap populations around the fitted fixed part.
Each population is sampled with the original per-area sample sizes, the
whole fit is repeated, and the squared errors of the re-estimated area
means against the population means are averaged.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from ._rng import STREAM_REB, substream, substream_seed
from .data import AreaIndex, CensusDataset, SurveyDataset, area_codes
from .estimate import area_means, census_codes, combine
from .exceptions import ConfigError, ConsistencyError, MerfError
from .forest import ForestConfig
from .merf import MerfModel, RandomForestLearner, fit_merf

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RebConfig:
    """Bootstrap settings.

    ``refit_forest`` replaces the forest settings of the refits (e.g. fewer
    trees for speed); ``None`` reuses the model's own configuration.
    ``n_jobs`` threads run replicates concurrently without changing results.
    """

    B: int = 200
    seed: int = 0
    n_jobs: int = 1
    refit_forest: ForestConfig | None = None

    def __post_init__(self):
        if self.B < 1:
            raise ConfigError("B must be a positive integer")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")


@dataclass(frozen=True)
class ResidualDecomposition:
    labels: np.ndarray
    codes: np.ndarray
    marginal: np.ndarray
    level2: np.ndarray
    level1: np.ndarray
    level1_c: np.ndarray
    level2_c: np.ndarray


@dataclass
class BootstrapResult:
    mse_hat: np.ndarray
    B: int
    n_failed: int = 0
    refit_forest: ForestConfig | None = None
    squared_errors: np.ndarray | None = field(default=None, repr=False)


def scale_to(values, variance: float) -> np.ndarray:
    """Centre ``values`` and rescale them to sample variance ``variance``
    (n - 1 denominator); values without spread map to zeros."""
    values = np.asarray(values, dtype=np.float64)
    centred = values - values.mean()
    sd = centred.std(ddof=1) if values.size > 1 else 0.0
    if not sd > 0:
        return np.zeros_like(centred)
    return centred * (math.sqrt(variance) / sd)


def decompose_residuals(model: MerfModel, survey: SurveyDataset) -> ResidualDecomposition:
    """Level-2 (area mean) and level-1 (within-area) parts of the
    out-of-bag residuals, plus versions scaled to the variance components."""
    if model.vc.sigma2_bc is None:
        raise ConfigError("model has no bias-corrected residual variance; "
                          "fit it with correct_bias=True")
    labels, codes = area_codes(survey.area)
    if len(labels) < 2:
        raise ConfigError("need at least two sampled areas to scale level-2 residuals")
    marginal = survey.y - np.asarray(model.oob, dtype=np.float64)
    level2 = area_means(marginal, codes, len(labels))
    level1 = marginal - level2[codes]
    return ResidualDecomposition(
        labels=labels, codes=codes, marginal=marginal, level2=level2, level1=level1,
        level1_c=scale_to(level1, model.vc.sigma2_bc),
        level2_c=scale_to(level2, model.vc.sigma2_v),
    )


class _Population:
    """Census-side quantities shared by all replicates."""

    def __init__(self, model, survey, census, index, decomposition):
        self.codes = census_codes(census, index)
        self.D = index.D
        self.X = census.X
        self.area = census.area
        self.columns = list(census.columns)
        self.fixed = model.predict_fixed(census.X)
        self.n_i = index.n_i
        self.in_sample = index.in_sample
        # residual blocks: each in-sample area resamples its own level-1
        # residuals, out-of-sample areas the pooled vector
        pos = {lab: k for k, lab in enumerate(decomposition.labels)}
        order = np.argsort(decomposition.codes, kind="stable")
        counts = np.bincount(decomposition.codes, minlength=len(decomposition.labels))
        starts = np.concatenate([[0], np.cumsum(counts)])
        n = order.size
        self.pool = np.concatenate([decomposition.level1_c[order], decomposition.level1_c])
        self.block_start = np.empty(index.D, dtype=np.int64)
        self.block_len = np.empty(index.D, dtype=np.int64)
        for i, (lab, inside) in enumerate(zip(index.labels, index.in_sample)):
            if inside:
                k = pos[lab]
                self.block_start[i], self.block_len[i] = starts[k], counts[k]
            else:
                self.block_start[i], self.block_len[i] = n, n
        self.level2 = decomposition.level2_c
        row_order = np.argsort(self.codes, kind="stable")
        N = np.bincount(self.codes, minlength=index.D)
        bounds = np.concatenate([[0], np.cumsum(N)])
        self.members = [row_order[bounds[i]:bounds[i + 1]] for i in range(index.D)]


def _replicate(model, pop: _Population, learner, merf_config, index, root, b):
    rng = substream(root, STREAM_REB, b, 0)
    effects = rng.choice(pop.level2, size=pop.D, replace=True)
    lens = pop.block_len[pop.codes]
    unit = pop.pool[pop.block_start[pop.codes] + rng.integers(0, lens)]
    y_b = pop.fixed + effects[pop.codes] + unit
    truth = area_means(y_b, pop.codes, pop.D)
    rows = np.concatenate([
        np.sort(rng.choice(pop.members[i], size=pop.n_i[i], replace=False))
        for i in range(pop.D) if pop.in_sample[i]
    ])
    sample = SurveyDataset(y=y_b[rows], X=pop.X[rows], area=pop.area[rows],
                           columns=pop.columns)
    config = replace(merf_config, seed=substream_seed(root, STREAM_REB, b, 1))
    try:
        refit = fit_merf(sample, learner, config, correct_bias=False)
        fixed = area_means(refit.predict_fixed(pop.X), pop.codes, pop.D)
        estimate = combine(fixed, refit, index).mu_hat
    except (MerfError, np.linalg.LinAlgError, FloatingPointError) as exc:
        logger.warning("bootstrap replicate %d failed: %s", b, exc)
        return None
    return (truth - estimate) ** 2


def bootstrap_mse(model: MerfModel, survey: SurveyDataset, census: CensusDataset,
                  index: AreaIndex, config: RebConfig = RebConfig()) -> BootstrapResult:
    """Bootstrap MSE of every census area's mean estimate (in ``index`` order).

    Failed replicates are skipped with a logged warning and excluded from
    the average; their number is reported in ``n_failed``.
    """
    if np.any(index.n_i > index.N_i):
        raise ConfigError("an area has more sampled than population units")
    if list(census.columns) != list(model.columns):
        raise ConsistencyError("census columns differ from the model's")
    decomposition = decompose_residuals(model, survey)
    pop = _Population(model, survey, census, index, decomposition)
    learner = model.learner
    merf_config = model.config
    if config.refit_forest is not None and isinstance(learner, RandomForestLearner):
        learner = RandomForestLearner(config.refit_forest)
        merf_config = replace(merf_config, forest=config.refit_forest)

    def run(b):
        return _replicate(model, pop, learner, merf_config, index, config.seed, b)

    if config.n_jobs > 1:
        with ThreadPoolExecutor(config.n_jobs) as pool:
            results = list(pool.map(run, range(config.B)))
    else:
        results = [run(b) for b in range(config.B)]
    done = [r for r in results if r is not None]
    n_failed = len(results) - len(done)
    if not done:
        raise MerfError("every bootstrap replicate failed")
    errors = np.vstack(done)
    # exactly rounded sums: the average does not depend on replicate order
    mse = np.array([math.fsum(errors[:, i]) for i in range(errors.shape[1])]) / len(done)
    return BootstrapResult(mse_hat=mse, B=config.B, n_failed=n_failed,
                           refit_forest=config.refit_forest, squared_errors=errors)
