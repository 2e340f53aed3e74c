"""Mixed effects random forest fitting.

The fit alternates between the fixed part and the random intercepts:

1. start from ``v_hat = 0``;
2. train the fixed-part learner on ``y - Z v_hat``, take its out-of-bag
   predictions, fit the variance components of ``y`` around them and
   update ``v_hat`` by the BLUP of the out-of-bag residuals;
3. stop once the relative change of the GLL criterion drops below
   ``tolerance`` (or after ``max_iter`` iterations).

Any learner with ``train``/``predict_oob``/``predict`` can supply the fixed
part; :class:`LinearLearner` turns the procedure into the classical
unit-level linear mixed model.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import mixed
from ._rng import STREAM_MERF, substream_seed
from .data import SurveyDataset, area_codes
from .exceptions import ConfigError
from .forest import Forest, ForestConfig, fit_forest
from .mixed import RandomEffects, VarianceComponents

logger = logging.getLogger(__name__)


class ConvergenceWarning(UserWarning):
    pass


class RandomForestLearner:
    """Regression forest fixed part; ``config.seed`` is replaced per call."""

    name = "forest"

    def __init__(self, config: ForestConfig | None = None):
        self.config = config if config is not None else ForestConfig()

    def train(self, X, y, seed: int) -> Forest:
        return fit_forest(X, y, replace(self.config, seed=int(seed)))

    def predict_oob(self, model: Forest) -> np.ndarray:
        return model.predict_oob()

    def predict(self, model: Forest, X_new) -> np.ndarray:
        return model.predict(X_new)

    def __repr__(self):
        return f"RandomForestLearner({self.config})"


@dataclass(frozen=True)
class LinearFit:
    intercept: float
    coef: np.ndarray
    fitted: np.ndarray

    def predict(self, X_new) -> np.ndarray:
        return self.intercept + np.asarray(X_new, dtype=np.float64) @ self.coef


class LinearLearner:
    """Least squares with intercept; its out-of-bag predictions are the
    fitted values."""

    name = "linear"

    def train(self, X, y, seed: int | None = None) -> LinearFit:
        X = np.asarray(X, dtype=np.float64)
        design = np.column_stack([np.ones(X.shape[0]), X])
        beta, *_ = np.linalg.lstsq(design, np.asarray(y, dtype=np.float64), rcond=None)
        return LinearFit(intercept=float(beta[0]), coef=beta[1:], fitted=design @ beta)

    def predict_oob(self, model: LinearFit) -> np.ndarray:
        return model.fitted

    def predict(self, model: LinearFit, X_new) -> np.ndarray:
        return model.predict(X_new)

    def __repr__(self):
        return "LinearLearner()"


@dataclass(frozen=True)
class MerfConfig:
    """Settings of the alternating fit.

    ``seed`` is the root of every random stream of the fit (forest trees of
    each iteration, bias-correction refits); the forest config's own seed is
    not used. ``bias_correction_B`` bootstrap refits estimate the
    bias-corrected residual variance after convergence.
    """

    tolerance: float = 1e-5
    max_iter: int = 50
    forest: ForestConfig = field(default_factory=ForestConfig)
    bias_correction_B: int = 100
    seed: int = 0

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ConfigError("tolerance must be positive")
        if self.max_iter < 1:
            raise ConfigError("max_iter must be positive")
        if self.bias_correction_B < 1:
            raise ConfigError("bias_correction_B must be positive")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")


@dataclass
class ConvergenceTrace:
    gll: list[float] = field(default_factory=list)
    rel_change: list[float] = field(default_factory=list)
    converged: bool = False
    tolerance: float = 1e-5
    optimizer: str = mixed.OPTIMIZER

    @property
    def n_iter(self) -> int:
        return len(self.gll)


@dataclass
class MerfState:
    """Everything one iteration hands to the next."""

    iteration: int
    v_hat: np.ndarray
    fitted: object = None
    oob: np.ndarray | None = None
    vc: VarianceComponents | None = None
    gll: float | None = None


@dataclass
class MerfModel:
    """A converged (or stopped) fit.

    ``oob`` are the final out-of-bag predictions at the survey rows;
    ``bias`` holds the residual-variance correction when it was computed.
    ``area_sizes`` (sampled areas -> n_i) and ``encoding`` (categorical
    levels) describe the survey, so a census can be aligned without it.
    """

    learner: object
    fitted: object
    effects: RandomEffects
    vc: VarianceComponents
    trace: ConvergenceTrace
    oob: np.ndarray
    columns: list[str]
    config: MerfConfig
    bias: object = None
    area_sizes: dict[str, int] = field(default_factory=dict)
    encoding: dict[str, list[str]] = field(default_factory=dict)
    response_name: str = "y"
    area_name: str = "area"

    @property
    def converged(self) -> bool:
        return self.trace.converged

    def predict_fixed(self, X_new) -> np.ndarray:
        return self.learner.predict(self.fitted, X_new)


def learner_seed(root: int) -> int:
    """Seed handed to the learner in every iteration.

    The same stream is reused across iterations so the fixed part changes
    only through the response; fresh forest randomness per iteration keeps
    the GLL criterion fluctuating above any useful tolerance.
    """
    return substream_seed(root, STREAM_MERF)


def update_step(state: MerfState, X, y, area, learner, seed: int) -> MerfState:
    """One pass of the alternation (steps a-e) from ``state``."""
    labels, codes = area_codes(area)
    b = state.iteration + 1
    y_star = y - state.v_hat[codes]
    fitted = learner.train(X, y_star, learner_seed(seed))
    oob = learner.predict_oob(fitted)
    vc = mixed.fit_variance_components(oob, y, area)
    resid = y - oob
    effects = mixed.blup(resid, area, vc)
    value = mixed.gll(resid, effects, vc, area)
    return MerfState(iteration=b, v_hat=effects.v_hat, fitted=fitted, oob=oob, vc=vc,
                     gll=value)


def initial_state(area) -> MerfState:
    labels, _ = area_codes(area)
    return MerfState(iteration=0, v_hat=np.zeros(len(labels)))


def relative_change(new: float, old: float) -> float:
    return abs(new - old) / abs(old) if old != 0 else np.inf


def fit_merf(survey: SurveyDataset, learner=None, config: MerfConfig = MerfConfig(),
             correct_bias: bool = True) -> MerfModel:
    """Fit the mixed model with a forest (default) or any other fixed part.

    Not converging within ``max_iter`` issues a :class:`ConvergenceWarning`
    and returns the last iterate with ``trace.converged = False``.
    ``correct_bias=False`` skips the residual-variance bias correction,
    which point estimates of area means do not need.
    """
    if learner is None:
        learner = RandomForestLearner(config.forest)
    if survey.n_areas < 2:
        raise ConfigError("need at least two sampled areas")
    X, y, area = survey.X, survey.y, survey.area
    trace = ConvergenceTrace(tolerance=config.tolerance)
    state = initial_state(area)
    while state.iteration < config.max_iter:
        state = update_step(state, X, y, area, learner, config.seed)
        if trace.gll:
            change = relative_change(state.gll, trace.gll[-1])
            trace.rel_change.append(change)
        trace.gll.append(state.gll)
        if trace.rel_change and trace.rel_change[-1] < config.tolerance:
            trace.converged = True
            break
    if not trace.converged:
        msg = (f"MERF did not converge in {config.max_iter} iterations "
               f"(last relative GLL change {trace.rel_change[-1] if trace.rel_change else np.nan:.3g})")
        logger.warning(msg)
        warnings.warn(msg, ConvergenceWarning, stacklevel=2)
    labels, _ = area_codes(area)
    model = MerfModel(
        learner=learner,
        fitted=state.fitted,
        effects=RandomEffects(labels=labels, v_hat=state.v_hat),
        vc=state.vc,
        trace=trace,
        oob=state.oob,
        columns=list(survey.columns),
        config=config,
        area_sizes=survey.area_sizes(),
        encoding=dict(survey.encoding),
        response_name=survey.response_name,
        area_name=survey.area_name,
    )
    if correct_bias:
        from .bias import bias_corrected_variance

        result = bias_corrected_variance(model, survey, config.bias_correction_B)
        model.bias = result
        model.vc = replace(model.vc, sigma2_bc=result.sigma2_bc)
    return model
