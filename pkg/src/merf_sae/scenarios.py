"""Model-based scenarios: synthetic populations and stratified samples."""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources

import numpy as np

from ._rng import substream
from .data import CensusDataset, SurveyDataset, area_codes
from .exceptions import ConfigError, ConsistencyError

SCENARIOS = ("Normal", "Interaction", "Normal-Par", "Interaction-Par")


def load_config(path=None) -> dict:
    """Scenario/sample-size config; the packaged default unless ``path`` is given."""
    if path is None:
        text = resources.files("merf_sae").joinpath("data/simulation.json").read_text()
    else:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    return json.loads(text)


def canonical_n_vector() -> np.ndarray:
    return np.array(load_config()["n_i"], dtype=np.int64)


@dataclass(frozen=True)
class ScenarioSpec:
    """One data-generating process.

    ``mean`` is ``"linear"`` (``c0 + c1 x1 + c2 x2``) or ``"interaction"``
    (``c0 + c1 x1 x2 + c2 x2^2``). Covariates are ``N(mu_i, sd^2)`` with an
    area location ``mu_i ~ U(-1, 1)`` drawn separately for x1 and x2. Pareto
    errors are type I with the given shape and scale, centred at their
    analytic mean.
    """

    name: str
    mean: str
    coef: tuple[float, float, float]
    sd_x1: float
    sd_x2: float
    sd_v: float
    error: dict
    D: int = 50
    N_i: int = 1000

    def __post_init__(self):
        if self.mean not in ("linear", "interaction"):
            raise ConfigError(f"unknown mean function {self.mean!r}")
        law = self.error.get("law")
        if law not in ("normal", "pareto"):
            raise ConfigError(f"unknown error law {law!r}")
        if law == "pareto" and self.error["shape"] <= 1:
            raise ConfigError("Pareto shape must exceed 1 for the mean to exist")

    @property
    def N(self) -> int:
        return self.D * self.N_i

    def mean_function(self, x1, x2):
        c0, c1, c2 = self.coef
        if self.mean == "linear":
            return c0 + c1 * x1 + c2 * x2
        return c0 + c1 * x1 * x2 + c2 * x2 ** 2

    def errors(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.error["law"] == "normal":
            return rng.normal(0.0, self.error["sd"], size)
        a, scale = self.error["shape"], self.error["scale"]
        return scale * (1.0 + rng.pareto(a, size)) - a * scale / (a - 1)


def scenario(name: str, config: dict | None = None) -> ScenarioSpec:
    config = load_config() if config is None else config
    table = config["scenarios"]
    lookup = {k.lower(): k for k in table}
    key = lookup.get(str(name).lower())
    if key is None:
        raise ConfigError(f"unknown scenario {name!r}; choose from {sorted(table)}")
    entry = table[key]
    return ScenarioSpec(name=key, mean=entry["mean"], coef=tuple(entry["coef"]),
                        sd_x1=entry["sd_x1"], sd_x2=entry["sd_x2"], sd_v=entry["sd_v"],
                        error=dict(entry["error"]), D=config.get("D", 50),
                        N_i=config.get("N_i", 1000))


def area_labels(D: int) -> np.ndarray:
    width = len(str(D))
    return np.array([f"A{i + 1:0{width}d}" for i in range(D)], dtype=object)


def generate_population(spec: ScenarioSpec, seed: int) -> CensusDataset:
    """A finite population of ``D`` areas with ``N_i`` units each, with response."""
    rng = substream(seed)
    D, N_i = spec.D, spec.N_i
    codes = np.repeat(np.arange(D), N_i)
    mu1 = rng.uniform(-1.0, 1.0, D)
    mu2 = rng.uniform(-1.0, 1.0, D)
    x1 = rng.normal(mu1[codes], spec.sd_x1)
    x2 = rng.normal(mu2[codes], spec.sd_x2)
    v = rng.normal(0.0, spec.sd_v, D)
    eps = spec.errors(rng, D * N_i)
    y = spec.mean_function(x1, x2) + v[codes] + eps
    return CensusDataset(X=np.column_stack([x1, x2]), area=area_labels(D)[codes],
                         columns=["x1", "x2"], y=y)


def draw_sample(population: CensusDataset, n_vector, seed: int,
                response_name: str = "y") -> tuple[SurveyDataset, np.ndarray]:
    """Stratified simple random sample without replacement.

    ``n_vector`` is either a sequence aligned with the population's area
    order or a mapping label -> n_i; areas with ``n_i = 0`` stay out of the
    sample. Returns the survey and the sampled population row indices.
    """
    if population.y is None:
        raise ConfigError("population has no response")
    labels, codes = area_codes(population.area)
    if isinstance(n_vector, dict):
        unknown = sorted(set(n_vector) - set(labels))
        if unknown:
            raise ConsistencyError(f"pattern references unknown areas {unknown}")
        n = np.array([int(n_vector.get(lab, 0)) for lab in labels])
    else:
        n = np.asarray(n_vector, dtype=np.int64)
        if n.shape != (len(labels),):
            raise ConfigError(f"need {len(labels)} sample sizes, got {n.shape}")
    N = np.bincount(codes, minlength=len(labels))
    if np.any(n < 0) or np.any(n > N):
        bad = [lab for lab, a, b in zip(labels, n, N) if a < 0 or a > b]
        raise ConfigError(f"sample sizes outside [0, N_i] for areas {bad}")
    rng = substream(seed)
    order = np.argsort(codes, kind="stable")
    starts = np.concatenate([[0], np.cumsum(N)])
    rows = []
    for i in range(len(labels)):
        if n[i] > 0:
            members = order[starts[i]:starts[i + 1]]
            rows.append(np.sort(rng.choice(members, size=n[i], replace=False)))
    rows = np.concatenate(rows) if rows else np.empty(0, dtype=np.int64)
    survey = SurveyDataset(y=population.y[rows], X=population.X[rows],
                           area=population.area[rows], columns=list(population.columns),
                           response_name=response_name, area_name=population.area_name)
    return survey, rows
