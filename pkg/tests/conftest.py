import dataclasses
import warnings

import numpy as np
import pytest

from merf_sae import scenarios
from merf_sae.data import CensusDataset, SurveyDataset, align
from merf_sae.forest import ForestConfig
from merf_sae.merf import ConvergenceWarning, MerfConfig


def small_spec(name="Normal", D=8, N_i=150):
    return dataclasses.replace(scenarios.scenario(name), D=D, N_i=N_i)


def small_world(name="Normal", D=8, N_i=150, n=(6, 9, 12, 0, 15, 7, 0, 10), seed=3):
    """Population with response, a stratified sample and the area index."""
    pop = scenarios.generate_population(small_spec(name, D, N_i), seed)
    survey, rows = scenarios.draw_sample(pop, list(n), seed + 1)
    return pop, survey, align(survey, pop), rows


def linear_survey(D=6, n_i=25, beta=(2.0, -1.5), sd_v=1.0, sd_e=0.5, seed=0):
    rng = np.random.default_rng(seed)
    area = np.repeat([f"a{i}" for i in range(D)], n_i)
    X = rng.normal(size=(D * n_i, len(beta)))
    v = rng.normal(0, sd_v, D)
    y = 1.0 + X @ np.asarray(beta) + np.repeat(v, n_i) + rng.normal(0, sd_e, D * n_i)
    return SurveyDataset(y=y, X=X, area=area, columns=[f"x{k + 1}" for k in range(len(beta))])


@pytest.fixture
def quick_config():
    return MerfConfig(forest=ForestConfig(n_trees=30), bias_correction_B=5, max_iter=30)


@pytest.fixture
def world():
    return small_world()


@pytest.fixture(autouse=True)
def _quiet_convergence():
    # small test forests often stop at max_iter; the warning itself is
    # tested explicitly where it matters
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        yield


def census_without_response(pop: CensusDataset) -> CensusDataset:
    return CensusDataset(X=pop.X, area=pop.area, columns=pop.columns)

