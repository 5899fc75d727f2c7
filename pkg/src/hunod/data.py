"""Dataset abstraction shared by all detectors.

A :class:`Dataset` is an immutable matrix of real-valued features with one row
per instance (business entity). Categorical columns are expanded with
:func:`one_hot_encode` before a dataset is built, and detectors work on the
unit-interval copy produced by :func:`scale_to_unit`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from hunod.errors import DataError

NUMERIC = "numeric"
ONE_HOT = "one-hot"


@dataclass(frozen=True)
class FeatureSchema:
    """Ordered feature names with a kind tag and source column for each.

    ``sources[i]`` is the categorical column a one-hot feature was derived
    from, or the feature's own name for numeric features.
    """

    names: tuple[str, ...]
    kinds: tuple[str, ...] = ()
    sources: tuple[str, ...] = ()

    def __post_init__(self):
        names = tuple(self.names)
        object.__setattr__(self, "names", names)
        if not self.kinds:
            object.__setattr__(self, "kinds", (NUMERIC,) * len(names))
        if not self.sources:
            object.__setattr__(self, "sources", names)
        if len(set(names)) != len(names):
            seen: set[str] = set()
            dupes = [n for n in names if n in seen or seen.add(n)]
            raise DataError(f"duplicate feature names: {sorted(set(dupes))}")
        if len(self.kinds) != len(names) or len(self.sources) != len(names):
            raise DataError("schema kinds/sources must align with names")
        bad = set(self.kinds) - {NUMERIC, ONE_HOT}
        if bad:
            raise DataError(f"unknown feature kinds: {sorted(bad)}")

    @property
    def d(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(name) from None


@dataclass(frozen=True, eq=False)
class Dataset:
    """Instances (rows) x features (columns); no missing or infinite cells."""

    schema: FeatureSchema
    ids: tuple[str, ...]
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        ids = tuple(str(i) for i in self.ids)
        object.__setattr__(self, "ids", ids)
        values = np.array(self.values, dtype=np.float64, copy=True)
        if values.ndim == 1 and len(ids) == 0:
            values = values.reshape(0, self.schema.d)
        if values.ndim != 2:
            raise DataError(f"values must be 2-D, got shape {values.shape}")
        if values.shape != (len(ids), self.schema.d):
            raise DataError(
                f"values shape {values.shape} does not match "
                f"{len(ids)} ids x {self.schema.d} features"
            )
        if len(set(ids)) != len(ids):
            raise DataError("instance ids must be unique")
        bad = ~np.isfinite(values)
        if bad.any():
            r, c = np.argwhere(bad)[0]
            raise DataError(
                f"non-finite value {values[r, c]!r} at row {ids[r]!r}, "
                f"column {self.schema.names[c]!r}"
            )
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def d(self) -> int:
        return self.schema.d

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.schema.index(name)]

    def columns_matching(self, prefix: str) -> list[str]:
        return [n for n in self.schema.names if n.startswith(prefix)]

    def take(self, rows: Sequence[int] | np.ndarray) -> "Dataset":
        """Row subset (by position or boolean mask), schema preserved."""
        rows = np.asarray(rows)
        if rows.dtype == bool:
            rows = np.flatnonzero(rows)
        return Dataset(self.schema, tuple(self.ids[i] for i in rows), self.values[rows])

    def select(self, ids: Iterable[str]) -> "Dataset":
        pos = {tin: i for i, tin in enumerate(self.ids)}
        try:
            rows = [pos[str(i)] for i in ids]
        except KeyError as exc:
            raise DataError(f"unknown instance id {exc.args[0]!r}") from None
        return self.take(rows)

    def to_frame(self, id_column: str = "tin") -> pd.DataFrame:
        frame = pd.DataFrame(self.values, columns=list(self.schema.names))
        frame.insert(0, id_column, list(self.ids))
        return frame

    @classmethod
    def from_frame(
        cls,
        frame: pd.DataFrame,
        id_column: str = "tin",
        onehot_sources: Iterable[str] = (),
    ) -> "Dataset":
        """Build from an all-numeric frame; columns named ``<src>_<value>`` for a
        listed source are tagged one-hot."""
        if id_column not in frame.columns:
            raise DataError(f"missing id column {id_column!r}")
        names = [c for c in frame.columns if c != id_column]
        srcs = list(onehot_sources)
        kinds, sources = [], []
        for name in names:
            src = next((s for s in srcs if name.startswith(s + "_")), None)
            kinds.append(ONE_HOT if src else NUMERIC)
            sources.append(src or name)
        try:
            values = frame[names].to_numpy(dtype=np.float64)
        except (TypeError, ValueError) as exc:
            raise DataError(f"non-numeric feature column: {exc}") from None
        schema = FeatureSchema(tuple(names), tuple(kinds), tuple(sources))
        return cls(schema, tuple(frame[id_column].astype(str)), values)

    def to_csv(self, path: str | Path, id_column: str = "tin") -> None:
        self.to_frame(id_column).to_csv(path, index=False, float_format="%.17g")


def read_csv(
    path: str | Path, id_column: str = "tin", onehot_sources: Iterable[str] = ()
) -> Dataset:
    """Load a feature CSV (header row required, dot decimal separator)."""
    try:
        frame = pd.read_csv(path, dtype={id_column: str}, keep_default_na=True)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise DataError(f"cannot read feature file {path}: {exc}") from None
    return Dataset.from_frame(frame, id_column, onehot_sources)


def one_hot_encode(
    raw: pd.DataFrame,
    categorical: Iterable[str] | None = None,
    id_column: str = "tin",
) -> Dataset:
    """Expand categorical columns into 0/1 indicator columns.

    A categorical column ``col`` with values ``v1 < v2 < ...`` (compared as
    strings) becomes columns ``col_v1, col_v2, ...`` appended after the numeric
    columns, which keep their original order. When ``categorical`` is None,
    every non-numeric column except the id column is treated as categorical.
    """
    if raw is None or len(raw) == 0:
        raise DataError("cannot encode an empty table")
    if id_column not in raw.columns:
        raise DataError(f"missing id column {id_column!r}")
    cols = [c for c in raw.columns if c != id_column]
    if categorical is None:
        categorical = [c for c in cols if not pd.api.types.is_numeric_dtype(raw[c])]
    categorical = list(categorical)
    missing = [c for c in categorical if c not in cols]
    if missing:
        raise DataError(f"categorical columns not in table: {missing}")

    numeric = [c for c in cols if c not in categorical]
    names = list(numeric)
    kinds = [NUMERIC] * len(numeric)
    sources = list(numeric)
    blocks = [raw[numeric].to_numpy(dtype=np.float64)] if numeric else []
    for col in categorical:
        if raw[col].isna().any():
            row = raw.index[raw[col].isna()][0]
            raise DataError(
                f"missing category at row {raw[id_column].iloc[row]!r}, column {col!r}"
            )
        labels = raw[col].astype(str).to_numpy()
        levels = sorted(set(labels))
        blocks.append((labels[:, None] == np.array(levels)[None, :]).astype(np.float64))
        names += [f"{col}_{v}" for v in levels]
        kinds += [ONE_HOT] * len(levels)
        sources += [col] * len(levels)
    values = np.hstack(blocks) if blocks else np.zeros((len(raw), 0))
    schema = FeatureSchema(tuple(names), tuple(kinds), tuple(sources))
    return Dataset(schema, tuple(raw[id_column].astype(str)), values)


@dataclass(frozen=True, eq=False)
class ScaledDataset:
    """Min-max scaled copy of a dataset; every value lies in [0, 1]."""

    base: Dataset
    values: np.ndarray = field(repr=False)
    mins: np.ndarray = field(repr=False)
    maxs: np.ndarray = field(repr=False)

    @property
    def ids(self) -> tuple[str, ...]:
        return self.base.ids

    @property
    def schema(self) -> FeatureSchema:
        return self.base.schema

    def __len__(self) -> int:
        return len(self.base)

    def as_dataset(self) -> Dataset:
        return Dataset(self.base.schema, self.base.ids, self.values)


def scale_to_unit(data: Dataset) -> ScaledDataset:
    """Map each column affinely onto [0, 1]; constant columns become 0."""
    x = data.values
    if len(data) == 0:
        empty = np.zeros(data.d)
        return ScaledDataset(data, x.copy(), empty, empty)
    mins = x.min(axis=0)
    maxs = x.max(axis=0)
    span = maxs - mins
    safe = np.where(span > 0, span, 1.0)
    scaled = np.where(span > 0, (x - mins) / safe, 0.0)
    scaled.flags.writeable = False
    return ScaledDataset(data, scaled, mins, maxs)
