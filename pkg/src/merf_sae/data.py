"""Unit-level survey and census datasets, CSV ingestion and area alignment."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .exceptions import ConsistencyError, EmptyInputError, ParseError, SchemaError


def clean_labels(area) -> np.ndarray:
    """Area labels as trimmed strings (object array)."""
    arr = np.asarray(area, dtype=object).ravel()
    out = np.empty(arr.shape[0], dtype=object)
    for i, a in enumerate(arr):
        if a is None or (isinstance(a, float) and np.isnan(a)):
            raise ParseError(f"missing area label in row {i}")
        out[i] = str(a).strip()
    return out


def area_codes(area) -> tuple[np.ndarray, np.ndarray]:
    """Unique labels in order of first appearance and integer codes into them."""
    codes, uniques = pd.factorize(np.asarray(area, dtype=object), sort=False)
    return np.asarray(uniques, dtype=object), codes.astype(np.intp)


def _check_columns(columns) -> list[str]:
    columns = [str(c) for c in columns]
    if any(c == "" for c in columns):
        raise SchemaError("covariate names must be non-empty")
    if len(set(columns)) != len(columns):
        raise SchemaError(f"duplicate covariate names: {columns}")
    return columns


def _as_matrix(X, n_rows: int) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    if X.ndim != 2 or X.shape[0] != n_rows:
        raise SchemaError(f"covariate matrix has shape {X.shape}, expected ({n_rows}, p)")
    if not np.all(np.isfinite(X)):
        raise ParseError("covariates contain missing or non-finite values")
    return X


@dataclass(frozen=True)
class SurveyDataset:
    """Unit-level sample: response ``y``, covariates ``X`` and area labels.

    ``encoding`` maps each one-hot encoded source column to its sorted levels
    (the first level is the dropped reference), so a census can be encoded
    identically.
    """

    y: np.ndarray
    X: np.ndarray
    area: np.ndarray
    columns: list[str]
    response_name: str = "y"
    area_name: str = "area"
    encoding: dict[str, list[str]] = field(default_factory=dict)

    def __post_init__(self):
        y = np.asarray(self.y, dtype=np.float64).ravel()
        if y.shape[0] == 0:
            raise EmptyInputError("survey has no rows")
        if not np.all(np.isfinite(y)):
            raise ParseError("response contains missing or non-finite values")
        X = _as_matrix(self.X, y.shape[0])
        area = clean_labels(self.area)
        if area.shape[0] != y.shape[0]:
            raise SchemaError("area labels and response differ in length")
        columns = _check_columns(self.columns)
        if len(columns) != X.shape[1]:
            raise SchemaError(f"{len(columns)} column names for {X.shape[1]} covariates")
        for name, value in (("y", y), ("X", X), ("area", area), ("columns", columns)):
            object.__setattr__(self, name, value)
        y.setflags(write=False)
        X.setflags(write=False)
        area.setflags(write=False)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def areas(self) -> np.ndarray:
        """Sampled area labels in order of first appearance."""
        return area_codes(self.area)[0]

    @property
    def n_areas(self) -> int:
        return len(self.areas)

    def area_sizes(self) -> dict[str, int]:
        labels, codes = area_codes(self.area)
        counts = np.bincount(codes, minlength=len(labels))
        return {lab: int(c) for lab, c in zip(labels, counts)}


@dataclass(frozen=True)
class CensusDataset:
    """Unit-level auxiliary population; ``y`` is only set for simulated or
    design-based populations."""

    X: np.ndarray
    area: np.ndarray
    columns: list[str]
    y: np.ndarray | None = None
    area_name: str = "area"

    def __post_init__(self):
        area = clean_labels(self.area)
        if area.shape[0] == 0:
            raise EmptyInputError("census has no rows")
        X = _as_matrix(self.X, area.shape[0])
        columns = _check_columns(self.columns)
        if len(columns) != X.shape[1]:
            raise SchemaError(f"{len(columns)} column names for {X.shape[1]} covariates")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "area", area)
        object.__setattr__(self, "columns", columns)
        X.setflags(write=False)
        area.setflags(write=False)
        if self.y is not None:
            y = np.asarray(self.y, dtype=np.float64).ravel()
            if y.shape[0] != area.shape[0] or not np.all(np.isfinite(y)):
                raise ParseError("census response must be finite and match the row count")
            y.setflags(write=False)
            object.__setattr__(self, "y", y)

    @property
    def N(self) -> int:
        return self.area.shape[0]

    @property
    def areas(self) -> np.ndarray:
        return area_codes(self.area)[0]

    def area_sizes(self) -> dict[str, int]:
        labels, codes = area_codes(self.area)
        counts = np.bincount(codes, minlength=len(labels))
        return {lab: int(c) for lab, c in zip(labels, counts)}

    def area_means(self) -> np.ndarray:
        """Finite-population area means of ``y`` in census area order."""
        if self.y is None:
            raise SchemaError("census has no response column")
        labels, codes = area_codes(self.area)
        return np.bincount(codes, weights=self.y, minlength=len(labels)) / np.bincount(codes)


@dataclass(frozen=True)
class AreaIndex:
    """All census areas with sample/population sizes."""

    labels: np.ndarray
    in_sample: np.ndarray
    n_i: np.ndarray
    N_i: np.ndarray

    @property
    def D(self) -> int:
        return len(self.labels)

    @property
    def n_in_sample(self) -> int:
        return int(self.in_sample.sum())

    def position(self) -> dict[str, int]:
        return {lab: i for i, lab in enumerate(self.labels)}


def align(survey: SurveyDataset, census: CensusDataset) -> AreaIndex:
    """Index every census area, flagging the ones present in the survey.

    Areas keep the census order of first appearance. Raises
    :class:`ConsistencyError` when a survey area or covariate is absent from
    the census.
    """
    if list(survey.columns) != list(census.columns):
        raise ConsistencyError(
            f"covariate columns differ: survey {survey.columns} vs census {census.columns}"
        )
    return index_from_sizes(census, survey.area_sizes())


def index_from_sizes(census: CensusDataset, sizes: dict[str, int]) -> AreaIndex:
    """:class:`AreaIndex` of ``census`` given the sampled areas' sizes."""
    labels, codes = area_codes(census.area)
    N_i = np.bincount(codes, minlength=len(labels))
    missing = sorted(set(sizes) - set(labels))
    if missing:
        raise ConsistencyError(f"survey areas absent from census: {missing}")
    n_i = np.array([sizes.get(lab, 0) for lab in labels], dtype=np.int64)
    return AreaIndex(
        labels=labels,
        in_sample=n_i > 0,
        n_i=n_i,
        N_i=N_i.astype(np.int64),
    )


# --------------------------------------------------------------------------
# CSV ingestion


def _read_csv(path) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"no such file: {path}")
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError as exc:
        raise EmptyInputError(f"{path} is empty") from exc
    if frame.shape[0] == 0:
        raise EmptyInputError(f"{path} has a header but no rows")
    frame.columns = [str(c).strip() for c in frame.columns]
    return frame


def _numeric(series: pd.Series, name: str) -> np.ndarray | None:
    """Parse a string column as floats, or None if it is not numeric."""
    text = series.str.strip()
    if (text == "").any():
        raise ParseError(f"column {name!r} has missing values")
    # numpy's conversion is correctly rounded; pandas' fast parser is not,
    # which would break exact round trips
    try:
        values = text.to_numpy().astype(np.float64)
    except ValueError:
        return None
    if not np.all(np.isfinite(values)):
        return None
    return values


def _encode_covariates(frame: pd.DataFrame, columns: list[str],
                       encoding: dict[str, list[str]] | None):
    """Numeric matrix from ``columns``; text columns become indicators for all
    but the lexicographically first level."""
    fitted = {} if encoding is None else encoding
    blocks, names, out_encoding = [], [], {}
    for col in columns:
        values = None if col in fitted else _numeric(frame[col], col)
        if values is not None:
            blocks.append(values[:, None])
            names.append(col)
            continue
        text = frame[col].str.strip()
        if (text == "").any():
            raise ParseError(f"column {col!r} has missing values")
        if encoding is None:
            levels = sorted(text.unique())
        else:
            if col not in fitted:
                raise SchemaError(f"column {col!r} is categorical here but numeric in the survey")
            levels = fitted[col]
            unseen = sorted(set(text.unique()) - set(levels))
            if unseen:
                raise ConsistencyError(f"levels {unseen} of {col!r} not seen in the survey")
        out_encoding[col] = list(levels)
        for level in levels[1:]:
            blocks.append((text.to_numpy() == level).astype(np.float64)[:, None])
            names.append(f"{col}={level}")
    if blocks:
        X = np.hstack(blocks)
    else:
        X = np.empty((frame.shape[0], 0))
    return X, names, out_encoding


def load_survey(path, response_column: str, area_column: str,
                covariates: list[str] | None = None) -> SurveyDataset:
    """Read a survey CSV.

    All columns other than the response and area become covariates unless
    ``covariates`` is given. Non-numeric covariates are one-hot encoded with
    the lexicographically first level as reference.
    """
    frame = _read_csv(path)
    for col in (response_column, area_column):
        if col not in frame.columns:
            raise SchemaError(f"column {col!r} missing from {path}")
    if covariates is None:
        covariates = [c for c in frame.columns if c not in (response_column, area_column)]
    missing = [c for c in covariates if c not in frame.columns]
    if missing:
        raise SchemaError(f"covariates {missing} missing from {path}")
    y = _numeric(frame[response_column], response_column)
    if y is None:
        raise ParseError(f"response column {response_column!r} is not numeric")
    X, names, encoding = _encode_covariates(frame, list(covariates), None)
    area = frame[area_column].str.strip()
    if (area == "").any():
        raise ParseError(f"column {area_column!r} has missing values")
    return SurveyDataset(y=y, X=X, area=area.to_numpy(dtype=object), columns=names,
                         response_name=response_column, area_name=area_column,
                         encoding=encoding)


def load_census(path, area_column: str, survey: SurveyDataset | None = None,
                response_column: str | None = None, columns: list[str] | None = None,
                encoding: dict[str, list[str]] | None = None) -> CensusDataset:
    """Read a census CSV.

    With ``survey`` given (or its ``columns`` and ``encoding``), covariates
    are encoded with the survey's levels and reordered to the survey's
    column order; extra census columns are ignored. Otherwise every column
    except the area (and response) is a covariate.
    """
    if survey is not None:
        columns, encoding = list(survey.columns), survey.encoding
    encoding = {} if encoding is None else encoding
    frame = _read_csv(path)
    if area_column not in frame.columns:
        raise SchemaError(f"column {area_column!r} missing from {path}")
    area = frame[area_column].str.strip()
    if (area == "").any():
        raise ParseError(f"column {area_column!r} has missing values")
    y = None
    if response_column is not None:
        if response_column not in frame.columns:
            raise SchemaError(f"column {response_column!r} missing from {path}")
        y = _numeric(frame[response_column], response_column)
        if y is None:
            raise ParseError(f"response column {response_column!r} is not numeric")
    if columns is None:
        sources = [c for c in frame.columns if c not in (area_column, response_column)]
        X, names, _ = _encode_covariates(frame, sources, None)
    else:
        sources = []
        for name in columns:
            head = name.split("=", 1)[0]
            src = head if "=" in name and head in encoding else name
            if src not in sources:
                sources.append(src)
        missing = [c for c in sources if c not in frame.columns]
        if missing:
            raise SchemaError(f"covariates {missing} missing from {path}")
        X, names, _ = _encode_covariates(frame, sources, encoding)
        if names != list(columns):
            raise ConsistencyError(f"census columns {names} do not match survey {columns}")
    return CensusDataset(X=X, area=area.to_numpy(dtype=object), columns=names, y=y,
                         area_name=area_column)


def write_survey(survey: SurveyDataset, path) -> None:
    """Write ``survey`` as CSV (area, response, covariates); values round-trip exactly."""
    frame = pd.DataFrame(survey.X, columns=survey.columns)
    frame.insert(0, survey.response_name, survey.y)
    frame.insert(0, survey.area_name, survey.area)
    frame.to_csv(path, index=False, float_format="%.17g")


def write_census(census: CensusDataset, path, response_name: str = "y") -> None:
    frame = pd.DataFrame(census.X, columns=census.columns)
    if census.y is not None:
        frame.insert(0, response_name, census.y)
    frame.insert(0, census.area_name, census.area)
    frame.to_csv(path, index=False, float_format="%.17g")
