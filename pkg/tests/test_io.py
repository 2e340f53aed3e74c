import json

import numpy as np
import pytest

from conftest import census_without_response, linear_survey
from merf_sae import io
from merf_sae.estimate import estimate_means
from merf_sae.exceptions import SchemaError
from merf_sae.merf import LinearLearner, MerfConfig, fit_merf


@pytest.fixture(scope="module")
def forest_model():
    from conftest import small_world
    from merf_sae.forest import ForestConfig

    pop, survey, index, _ = small_world()
    cfg = MerfConfig(forest=ForestConfig(n_trees=15), bias_correction_B=3, max_iter=10)
    import warnings
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        model = fit_merf(survey, config=cfg)
    return model, census_without_response(pop), index


def test_array_codec_is_exact():
    for a in (np.random.default_rng(0).normal(size=(3, 4)), np.arange(5, dtype=np.int32),
              np.array([np.inf, -0.0, 5e-324]), np.zeros((0, 2))):
        back = io.decode_array(json.loads(json.dumps(io.encode_array(a))))
        assert back.dtype == a.dtype and back.shape == a.shape
        assert back.tobytes() == a.tobytes()


def test_forest_model_round_trip(tmp_path, forest_model):
    model, census, index = forest_model
    path = io.save_model(model, tmp_path / "m.json")
    back = io.load_model(path)
    assert io.dumps(back) == io.dumps(model)
    a = estimate_means(model, census, index).mu_hat
    b = estimate_means(back, census, index).mu_hat
    assert a.tobytes() == b.tobytes()
    assert back.fitted.predict_oob().tobytes() == model.oob.tobytes()
    assert back.area_sizes == model.area_sizes
    assert back.vc == model.vc
    assert back.trace.gll == model.trace.gll


def test_thread_count_not_stored(forest_model):
    import dataclasses

    model, _, _ = forest_model
    other = dataclasses.replace(model, config=dataclasses.replace(
        model.config, forest=dataclasses.replace(model.config.forest, n_jobs=8)))
    assert io.dumps(other) == io.dumps(model)


def test_linear_model_round_trip(tmp_path):
    survey = linear_survey()
    model = fit_merf(survey, LinearLearner(), MerfConfig(bias_correction_B=3))
    back = io.load_model(io.save_model(model, tmp_path / "lin.json"))
    assert isinstance(back.learner, LinearLearner)
    X = np.random.default_rng(1).normal(size=(10, 2))
    assert back.predict_fixed(X).tobytes() == model.predict_fixed(X).tobytes()
    assert io.dumps(back) == io.dumps(model)


def test_schema_errors(tmp_path, forest_model):
    with pytest.raises(SchemaError):
        io.load_model(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(SchemaError):
        io.load_model(bad)
    obj = io.model_to_dict(forest_model[0])
    for change in ({"format": "other"}, {"version": 99}):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({**obj, **change}))
        with pytest.raises(SchemaError):
            io.load_model(path)
    partial = dict(obj)
    del partial["effects"]
    path = tmp_path / "p.json"
    path.write_text(json.dumps(partial))
    with pytest.raises(SchemaError):
        io.load_model(path)
