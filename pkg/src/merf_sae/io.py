"""Model files: a versioned JSON envelope.

Arrays are stored as ``{"dtype", "shape", "data"}`` with ``data`` the
base64-encoded little-endian buffer, so floats round-trip bit for bit.
Keys are written sorted and nothing time-dependent is stored, so fitting
twice with the same seed produces byte-identical files.

Envelope (version 1)::

    format        "merf-sae-model"
    version       1
    columns       covariate names (after one-hot encoding)
    encoding      categorical source column -> sorted levels
    response_name, area_name
    area_sizes    [[label, n_i], ...] in survey order
    config        MerfConfig (tolerance, max_iter, bias_correction_B, seed, forest)
    learner       {"type": "forest", "config": ForestConfig} | {"type": "linear"}
    fitted        forest node arrays (feature, threshold, left, right, value,
                  count, offsets, inbag, X_train, n_features) or linear
                  coefficients (intercept, coef, fitted)
    effects       {"labels", "v_hat"}
    vc            {"sigma2_v", "sigma2_eps", "sigma2_bc", "loglik"}
    trace         {"gll", "rel_change", "converged", "tolerance", "optimizer"}
    oob           final out-of-bag predictions
    bias          {"sigma2_naive", "K_hat", "sigma2_bc", "B", "floored",
                  "replicate_K"} or null
"""

from __future__ import annotations

import base64
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .bias import BiasCorrectionResult
from .exceptions import SchemaError
from .forest import Forest, ForestConfig
from .merf import (ConvergenceTrace, LinearFit, LinearLearner, MerfConfig, MerfModel,
                   RandomForestLearner)
from .mixed import RandomEffects, VarianceComponents

FORMAT = "merf-sae-model"
VERSION = 1


def encode_array(a) -> dict:
    a = np.asarray(a)
    little = a.astype(a.dtype.newbyteorder("<"), copy=False)
    return {"dtype": little.dtype.str, "shape": list(a.shape),
            "data": base64.b64encode(np.ascontiguousarray(little).tobytes()).decode("ascii")}


def decode_array(obj: dict) -> np.ndarray:
    raw = base64.b64decode(obj["data"])
    return np.frombuffer(raw, dtype=np.dtype(obj["dtype"])).reshape(obj["shape"]).copy()


def _forest_to_dict(forest: Forest) -> dict:
    out = {"n_features": forest.n_features}
    for name in ("feature", "threshold", "left", "right", "value", "count", "offsets",
                 "inbag"):
        out[name] = encode_array(getattr(forest, name))
    out["X_train"] = encode_array(forest.X_train) if forest.X_train is not None else None
    return out


def _forest_from_dict(obj: dict, config: ForestConfig) -> Forest:
    arrays = {name: decode_array(obj[name]) for name in
              ("feature", "threshold", "left", "right", "value", "count", "offsets", "inbag")}
    X_train = decode_array(obj["X_train"]) if obj.get("X_train") is not None else None
    return Forest(config=config, n_features=int(obj["n_features"]), X_train=X_train, **arrays)


def _forest_settings(config: ForestConfig) -> dict:
    # worker counts never change results, so they are not part of the model
    out = asdict(config)
    out.pop("n_jobs")
    return out


def model_to_dict(model: MerfModel) -> dict:
    config = asdict(model.config)
    config["forest"] = _forest_settings(model.config.forest)
    if isinstance(model.learner, RandomForestLearner):
        learner = {"type": "forest", "config": _forest_settings(model.learner.config)}
        fitted = _forest_to_dict(model.fitted)
    elif isinstance(model.learner, LinearLearner):
        learner = {"type": "linear"}
        fitted = {"intercept": model.fitted.intercept, "coef": encode_array(model.fitted.coef),
                  "fitted": encode_array(model.fitted.fitted)}
    else:
        raise SchemaError(f"cannot serialize learner {model.learner!r}")
    bias = None
    if model.bias is not None:
        b = model.bias
        bias = {"sigma2_naive": b.sigma2_naive, "K_hat": b.K_hat, "sigma2_bc": b.sigma2_bc,
                "B": b.B, "floored": b.floored,
                "replicate_K": encode_array(b.replicate_K) if b.replicate_K is not None
                else None}
    return {
        "format": FORMAT,
        "version": VERSION,
        "columns": list(model.columns),
        "encoding": model.encoding,
        "response_name": model.response_name,
        "area_name": model.area_name,
        "area_sizes": [[lab, int(n)] for lab, n in model.area_sizes.items()],
        "config": config,
        "learner": learner,
        "fitted": fitted,
        "effects": {"labels": [str(x) for x in model.effects.labels],
                    "v_hat": encode_array(model.effects.v_hat)},
        "vc": asdict(model.vc),
        "trace": {"gll": list(model.trace.gll), "rel_change": list(model.trace.rel_change),
                  "converged": model.trace.converged, "tolerance": model.trace.tolerance,
                  "optimizer": model.trace.optimizer},
        "oob": encode_array(model.oob),
        "bias": bias,
    }


def model_from_dict(obj: dict) -> MerfModel:
    if obj.get("format") != FORMAT:
        raise SchemaError(f"not a model file (format {obj.get('format')!r})")
    if obj.get("version") != VERSION:
        raise SchemaError(f"unsupported model file version {obj.get('version')!r}")
    cfg = dict(obj["config"])
    forest_cfg = ForestConfig(**cfg.pop("forest"))
    config = MerfConfig(forest=forest_cfg, **cfg)
    kind = obj["learner"]["type"]
    if kind == "forest":
        learner = RandomForestLearner(ForestConfig(**obj["learner"]["config"]))
        fitted = _forest_from_dict(obj["fitted"], learner.config)
    elif kind == "linear":
        learner = LinearLearner()
        f = obj["fitted"]
        fitted = LinearFit(intercept=float(f["intercept"]), coef=decode_array(f["coef"]),
                           fitted=decode_array(f["fitted"]))
    else:
        raise SchemaError(f"unknown learner type {kind!r}")
    bias = None
    if obj.get("bias") is not None:
        b = dict(obj["bias"])
        rep = b.pop("replicate_K")
        bias = BiasCorrectionResult(replicate_K=decode_array(rep) if rep is not None else None,
                                    **b)
    trace = ConvergenceTrace(**obj["trace"])
    return MerfModel(
        learner=learner,
        fitted=fitted,
        effects=RandomEffects(labels=np.array(obj["effects"]["labels"], dtype=object),
                              v_hat=decode_array(obj["effects"]["v_hat"])),
        vc=VarianceComponents(**obj["vc"]),
        trace=trace,
        oob=decode_array(obj["oob"]),
        columns=list(obj["columns"]),
        config=config,
        bias=bias,
        area_sizes={lab: int(n) for lab, n in obj["area_sizes"]},
        encoding={k: list(v) for k, v in obj["encoding"].items()},
        response_name=obj["response_name"],
        area_name=obj["area_name"],
    )


def dumps(model: MerfModel) -> str:
    return json.dumps(model_to_dict(model), sort_keys=True, indent=1)


def save_model(model: MerfModel, path) -> Path:
    path = Path(path)
    path.write_text(dumps(model) + "\n", encoding="utf-8")
    return path


def load_model(path) -> MerfModel:
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"no such model file: {path}")
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path} is not valid JSON: {exc}") from exc
    try:
        return model_from_dict(obj)
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"{path} is missing model fields: {exc}") from exc
