"""Area-level mean prediction from a fitted model and census covariates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy import stats

from .data import AreaIndex, CensusDataset, area_codes
from .exceptions import ConsistencyError

COLUMNS = ["area", "in_sample", "n_i", "N_i", "mu_hat", "v_hat", "mse_hat", "cv"]


@dataclass
class AreaEstimates:
    """Per-area estimates in :class:`AreaIndex` order.

    ``mse_hat`` and ``cv`` stay NaN until a bootstrap has been attached with
    :meth:`with_mse`.
    """

    labels: np.ndarray
    in_sample: np.ndarray
    n_i: np.ndarray
    N_i: np.ndarray
    mu_hat: np.ndarray
    fixed_part_mean: np.ndarray
    v_hat: np.ndarray
    mse_hat: np.ndarray | None = None

    @property
    def cv(self) -> np.ndarray:
        if self.mse_hat is None:
            return np.full(self.mu_hat.shape, np.nan)
        with np.errstate(divide="ignore", invalid="ignore"):
            cv = np.sqrt(self.mse_hat) / self.mu_hat
        return np.where(self.mu_hat != 0, cv, np.nan)

    def with_mse(self, mse_hat) -> "AreaEstimates":
        mse_hat = np.asarray(mse_hat, dtype=np.float64)
        if mse_hat.shape != self.mu_hat.shape:
            raise ConsistencyError("one MSE per area expected")
        return AreaEstimates(self.labels, self.in_sample, self.n_i, self.N_i, self.mu_hat,
                             self.fixed_part_mean, self.v_hat, mse_hat)

    def confidence_interval(self, level: float = 0.95) -> tuple[np.ndarray, np.ndarray]:
        """Normal-approximation interval ``mu_hat -/+ z sqrt(mse_hat)``."""
        if self.mse_hat is None:
            raise ConsistencyError("no MSE estimates attached")
        z = stats.norm.ppf(0.5 + level / 2)
        half = z * np.sqrt(self.mse_hat)
        return self.mu_hat - half, self.mu_hat + half

    def to_frame(self) -> pd.DataFrame:
        mse = self.mse_hat if self.mse_hat is not None else np.full(self.mu_hat.shape, np.nan)
        return pd.DataFrame({
            "area": self.labels, "in_sample": self.in_sample, "n_i": self.n_i,
            "N_i": self.N_i, "mu_hat": self.mu_hat, "v_hat": self.v_hat,
            "mse_hat": mse, "cv": self.cv,
        })[COLUMNS]

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.17g")


def area_means(values, codes, n_areas: int) -> np.ndarray:
    return np.bincount(codes, weights=values, minlength=n_areas) / np.bincount(
        codes, minlength=n_areas)


def census_codes(census: CensusDataset, index: AreaIndex) -> np.ndarray:
    """Position in ``index`` of every census row."""
    pos = index.position()
    labels, codes = area_codes(census.area)
    missing = [lab for lab in labels if lab not in pos]
    if missing:
        raise ConsistencyError(f"census areas {missing} are not in the area index")
    mapping = np.array([pos[lab] for lab in labels], dtype=np.intp)
    out = mapping[codes]
    if np.any(np.bincount(out, minlength=index.D) == 0):
        absent = [lab for lab, c in zip(index.labels, np.bincount(out, minlength=index.D)) if c == 0]
        raise ConsistencyError(f"areas {absent} have no census rows")
    return out


def combine(fixed_part_mean, model, index: AreaIndex) -> AreaEstimates:
    """Add the random effects of in-sample areas to area means of the fixed part."""
    effects = model.effects.as_dict()
    unknown = [lab for lab, s in zip(index.labels, index.in_sample) if s and lab not in effects]
    if unknown:
        raise ConsistencyError(f"in-sample areas {unknown} are not in the model")
    v_hat = np.array([effects[lab] if s else 0.0 for lab, s in zip(index.labels, index.in_sample)])
    return AreaEstimates(
        labels=index.labels, in_sample=index.in_sample.copy(), n_i=index.n_i.copy(),
        N_i=index.N_i.copy(), mu_hat=fixed_part_mean + v_hat,
        fixed_part_mean=fixed_part_mean, v_hat=v_hat)


def estimate_means(model, census: CensusDataset, index: AreaIndex) -> AreaEstimates:
    """Area means: census average of the fixed-part predictions, plus the
    random effect for in-sample areas."""
    if list(census.columns) != list(model.columns):
        raise ConsistencyError(f"census columns {census.columns} differ from model {model.columns}")
    codes = census_codes(census, index)
    pred = model.predict_fixed(census.X)
    return combine(area_means(pred, codes, index.D), model, index)
