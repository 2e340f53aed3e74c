import dataclasses
import warnings

import numpy as np
import pytest
from scipy import optimize

from conftest import linear_survey
from merf_sae.data import CensusDataset, SurveyDataset, align
from merf_sae.estimate import estimate_means
from merf_sae.exceptions import ConfigError
from merf_sae.forest import ForestConfig
from merf_sae.merf import (ConvergenceWarning, LinearLearner, MerfConfig, RandomForestLearner,
                           fit_merf, initial_state, relative_change, update_step)
from merf_sae.mixed import gll


def eblup_oracle(X, y, area):
    """Unit-level random-intercept model fitted by direct ML.

    For a variance ratio gamma the GLS coefficients and the profiled unit
    variance are closed-form; gamma itself is found numerically.
    """
    labels, codes = np.unique(area, return_inverse=True)
    D = np.column_stack([np.ones(len(y)), X])
    n_i = np.bincount(codes)
    n = len(y)

    def pieces(gamma):
        w = gamma / (1 + n_i * gamma)
        A = np.zeros((D.shape[1], D.shape[1]))
        b = np.zeros(D.shape[1])
        for i in range(len(labels)):
            Di, yi = D[codes == i], y[codes == i]
            A += Di.T @ Di - w[i] * np.outer(Di.sum(0), Di.sum(0))
            b += Di.T @ yi - w[i] * Di.sum(0) * yi.sum()
        beta = np.linalg.solve(A, b)
        r = y - D @ beta
        rsum = np.bincount(codes, weights=r)
        quad = r @ r - np.sum(w * rsum ** 2)
        s2e = quad / n
        ll = -0.5 * (n * np.log(s2e) + np.sum(np.log(1 + n_i * gamma)))
        return beta, s2e, ll, r

    grid = np.linspace(-15, 10, 251)
    k = int(np.argmax([pieces(np.exp(t))[2] for t in grid]))
    res = optimize.minimize_scalar(lambda t: -pieces(np.exp(t))[2],
                                   bounds=(grid[max(k - 1, 0)], grid[min(k + 1, 250)]),
                                   method="bounded", options={"xatol": 1e-12})
    gamma = float(np.exp(res.x))
    beta, s2e, _, r = pieces(gamma)
    rbar = np.bincount(codes, weights=r) / n_i
    v = n_i * gamma / (1 + n_i * gamma) * rbar
    return beta, gamma * s2e, s2e, dict(zip(labels, v))


def tight():
    return MerfConfig(tolerance=1e-13, max_iter=5000, bias_correction_B=3)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_linear_learner_reproduces_eblup(seed):
    survey = linear_survey(D=8, n_i=20, sd_v=1.0, sd_e=0.7, seed=seed)
    model = fit_merf(survey, LinearLearner(), tight(), correct_bias=False)
    beta, s2v, s2e, v = eblup_oracle(survey.X, survey.y, survey.area)
    assert model.converged
    np.testing.assert_allclose([model.fitted.intercept, *model.fitted.coef], beta, rtol=1e-5,
                               atol=1e-6)
    assert model.vc.sigma2_v == pytest.approx(s2v, rel=1e-4)
    assert model.vc.sigma2_eps == pytest.approx(s2e, rel=1e-5)

    # area means against the oracle EBLUP on a synthetic census
    rng = np.random.default_rng(seed + 100)
    labels = list(v)
    census = CensusDataset(X=rng.normal(size=(400, 2)), area=np.repeat(labels, 50),
                           columns=survey.columns)
    est = estimate_means(model, census, align(survey, census))
    design = np.column_stack([np.ones(400), census.X])
    truth = (design @ beta).reshape(len(labels), 50).mean(axis=1) + np.array(list(v.values()))
    np.testing.assert_allclose(est.mu_hat, truth, rtol=1e-6, atol=1e-6)


def test_linear_learner_recovers_coefficients():
    survey = linear_survey(D=20, n_i=50, beta=(2.0, -1.5), sd_v=1.0, sd_e=0.5, seed=9)
    model = fit_merf(survey, LinearLearner(), MerfConfig(bias_correction_B=3),
                     correct_bias=False)
    np.testing.assert_allclose(model.fitted.coef, [2.0, -1.5], atol=0.05)


def test_zero_between_area_signal():
    survey = linear_survey(D=30, n_i=40, sd_v=0.0, sd_e=1.0, seed=4)
    model = fit_merf(survey, LinearLearner(), MerfConfig(), correct_bias=False)
    assert model.vc.sigma2_v < 0.02
    assert np.max(np.abs(model.effects.v_hat)) < 0.1


class Recorder:
    """Linear learner that remembers every response it was trained on."""

    def __init__(self):
        self.inner = LinearLearner()
        self.seen = []

    def train(self, X, y, seed):
        self.seen.append(np.array(y))
        return self.inner.train(X, y, seed)

    def predict_oob(self, model):
        return self.inner.predict_oob(model)

    def predict(self, model, X_new):
        return self.inner.predict(model, X_new)


def test_first_iteration_uses_raw_response():
    survey = linear_survey()
    rec = Recorder()
    fit_merf(survey, rec, MerfConfig(max_iter=3), correct_bias=False)
    assert rec.seen[0].tobytes() == survey.y.tobytes()
    assert not np.array_equal(rec.seen[1], survey.y)


def test_update_step_matches_fit_trace(world, quick_config):
    _, survey, _, _ = world
    cfg = dataclasses.replace(quick_config, max_iter=2, tolerance=1e-300)
    learner = RandomForestLearner(cfg.forest)
    model = fit_merf(survey, learner, cfg, correct_bias=False)
    state = initial_state(survey.area)
    states = []
    for _ in range(2):
        state = update_step(state, survey.X, survey.y, survey.area, learner, cfg.seed)
        states.append(state)
    assert [s.gll for s in states] == model.trace.gll
    assert model.trace.rel_change == [relative_change(states[1].gll, states[0].gll)]
    assert states[1].oob.tobytes() == model.oob.tobytes()
    assert states[1].v_hat.tobytes() == model.effects.v_hat.tobytes()


def test_trace_recomputes_from_components(world, quick_config):
    _, survey, _, _ = world
    model = fit_merf(survey, config=quick_config, correct_bias=False)
    recomputed = gll(survey.y - model.oob, model.effects, model.vc, survey.area)
    assert recomputed == pytest.approx(model.trace.gll[-1], rel=1e-12)
    assert model.trace.n_iter <= quick_config.max_iter
    assert len(model.trace.rel_change) == model.trace.n_iter - 1
    ok = bool(model.trace.rel_change) and model.trace.rel_change[-1] < quick_config.tolerance
    assert model.converged == ok
    assert all(c >= quick_config.tolerance for c in model.trace.rel_change[:-1])


def test_non_convergence_warns(world, quick_config):
    _, survey, _, _ = world
    cfg = dataclasses.replace(quick_config, max_iter=2, tolerance=1e-300)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        model = fit_merf(survey, config=cfg, correct_bias=False)
    assert not model.converged
    assert model.trace.n_iter == 2
    assert any(issubclass(w.category, ConvergenceWarning) for w in caught)
    # downstream estimation still works
    assert np.all(np.isfinite(model.effects.v_hat))


def test_seeded_determinism(world, quick_config):
    _, survey, _, _ = world
    a = fit_merf(survey, config=quick_config)
    b = fit_merf(survey, config=quick_config)
    assert a.trace.gll == b.trace.gll
    assert a.oob.tobytes() == b.oob.tobytes()
    assert a.vc == b.vc
    c = fit_merf(survey, config=dataclasses.replace(quick_config, seed=1))
    assert c.oob.tobytes() != a.oob.tobytes()


def test_threads_do_not_change_fit(world, quick_config):
    _, survey, _, _ = world
    cfg4 = dataclasses.replace(quick_config,
                               forest=dataclasses.replace(quick_config.forest, n_jobs=4))
    a = fit_merf(survey, config=quick_config)
    b = fit_merf(survey, config=cfg4)
    assert a.oob.tobytes() == b.oob.tobytes()
    assert a.vc == b.vc


def test_bias_correction_attached(world, quick_config):
    _, survey, _, _ = world
    model = fit_merf(survey, config=quick_config)
    assert model.bias is not None and model.bias.B == quick_config.bias_correction_B
    assert model.vc.sigma2_bc == model.bias.sigma2_bc <= model.vc.sigma2_eps
    assert fit_merf(survey, config=quick_config, correct_bias=False).vc.sigma2_bc is None


def test_model_records_survey_description(world, quick_config):
    _, survey, _, _ = world
    model = fit_merf(survey, config=quick_config, correct_bias=False)
    assert model.area_sizes == survey.area_sizes()
    assert model.columns == survey.columns


def test_config_validation():
    for bad in ({"tolerance": 0.0}, {"max_iter": 0}, {"bias_correction_B": 0}, {"seed": -2}):
        with pytest.raises(ConfigError):
            MerfConfig(**bad)
    one_area = SurveyDataset(y=[1.0, 2.0, 3.0], X=[[0.0], [1.0], [2.0]], area=["a"] * 3,
                             columns=["x"])
    with pytest.raises(ConfigError):
        fit_merf(one_area, LinearLearner())


def test_forest_merf_captures_nonlinearity(quick_config):
    rng = np.random.default_rng(12)
    D, m = 10, 40
    area = np.repeat([f"a{i}" for i in range(D)], m)
    X = rng.uniform(-2, 2, size=(D * m, 2))
    v = rng.normal(0, 1.0, D)
    y = 3 * np.sin(2 * X[:, 0]) * X[:, 1] + np.repeat(v, m) + rng.normal(0, 0.3, D * m)
    survey = SurveyDataset(y=y, X=X, area=area, columns=["x1", "x2"])
    cfg = dataclasses.replace(quick_config, forest=ForestConfig(n_trees=100, mtry=2))
    forest_fit = fit_merf(survey, config=cfg, correct_bias=False)
    linear_fit = fit_merf(survey, LinearLearner(), cfg, correct_bias=False)
    # the forest absorbs the interaction, so far less is left as unit-level noise
    assert forest_fit.vc.sigma2_eps < 0.5 * linear_fit.vc.sigma2_eps
    assert np.corrcoef(forest_fit.effects.v_hat, v)[0, 1] > 0.9
