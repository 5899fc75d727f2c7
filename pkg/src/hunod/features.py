"""Entity-level features from individual monthly income-tax declarations.

Declarations are aggregated per payer (TIN) and calendar month over a
13-month window, then pivoted into one wide row per entity with columns named
``<family>_<YY>m<M>`` (for example ``average_salary_16m4``), plus the static
entity attributes and the yearly ``capital_labor_12m`` aggregate.

Conventions: a month without activity yields 0 for every monthly family, and
every ratio with a zero denominator is 0.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import pandas as pd

from hunod.data import Dataset, one_hot_encode, read_csv
from hunod.errors import ConfigError, DataError

logger = logging.getLogger(__name__)

INCOME_TYPES = (
    "salary",
    "sick_leave",
    "dividend",
    "interest",
    "rent",
    "author",
    "temporary_work",
    "service_contract",
    "other",
)

DECLARATION_COLUMNS = (
    "tin",
    "pid",
    "year_month",
    "income_type",
    "gross_amount",
    "tax_paid",
    "health_contrib",
    "pension_contrib",
    "unemployment_contrib",
    "payer_nace",
    "payer_org_type",
    "payer_founded_year",
    "receiver_birth_year",
    "receiver_gender",
    "receiver_municipality",
)
AMOUNT_COLUMNS = (
    "gross_amount",
    "tax_paid",
    "health_contrib",
    "pension_contrib",
    "unemployment_contrib",
)
_STRING_COLUMNS = (
    "tin",
    "pid",
    "year_month",
    "income_type",
    "payer_nace",
    "payer_org_type",
    "receiver_gender",
    "receiver_municipality",
)

# income categories behind the avg_age_<category> families
AGE_CATEGORIES: dict[str, tuple[str, ...]] = {
    "salary": ("salary",),
    "sick_leave": ("sick_leave",),
    "service_fee": ("service_contract", "temporary_work"),
    "rent": ("rent",),
    "owner_income": ("dividend",),
    "author": ("author",),
    "other": ("interest", "other"),
}

MONTHLY_FAMILIES = (
    "average_salary",
    "median_salary",
    "stdev_salary",
    "fraction_b26r",
    "capital_labor",
    "fbs",
    "tbs",
    "fball",
    "total_employees",
    "total_persons",
    "avg_age",
) + tuple(f"avg_age_{c}" for c in AGE_CATEGORIES)

YEARLY_FEATURES = ("capital_labor_12m",)
STATIC_NUMERIC = ("tin_age",)
CATEGORICAL = ("nace", "org_type")


@dataclass(frozen=True)
class FeatureConfig:
    """Aggregation window and domain constants.

    ``cap`` is the social-contribution base cap; when unset it is
    ``cap_multiple * average_salary``.
    """

    window_start: str = "2016-03"
    n_months: int = 13
    average_salary: float = 1000.0
    cap_multiple: float = 5.0
    cap: float | None = None
    employee_income_types: tuple[str, ...] = ("salary",)
    employee_cutoff: int = 10

    def __post_init__(self):
        if self.n_months < 1:
            raise ConfigError("n_months must be positive")
        if self.contribution_cap <= 0:
            raise ConfigError("contribution cap must be positive")
        parse_year_month(self.window_start)

    @property
    def contribution_cap(self) -> float:
        return float(self.cap) if self.cap is not None else self.cap_multiple * self.average_salary

    @property
    def months(self) -> list[str]:
        return window_months(self.window_start, self.n_months)

    @property
    def reference_year(self) -> int:
        return parse_year_month(self.window_start)[0]


@dataclass(frozen=True)
class ScoringConfig:
    threshold: float = 0.30
    indicator: str = "fball"

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError(f"scoring threshold must lie in [0, 1], got {self.threshold}")


def parse_year_month(text: str) -> tuple[int, int]:
    try:
        year, month = (int(p) for p in str(text).split("-"))
    except ValueError:
        raise DataError(f"bad year_month {text!r}, expected YYYY-MM") from None
    if not 1 <= month <= 12:
        raise DataError(f"bad month in {text!r}")
    return year, month


def window_months(start: str, n: int) -> list[str]:
    year, month = parse_year_month(start)
    out = []
    for k in range(n):
        y, m = divmod(month - 1 + k, 12)
        out.append(f"{year + y:04d}-{m + 1:02d}")
    return out


def month_label(year_month: str) -> str:
    """``2016-04`` -> ``16m4``."""
    year, month = parse_year_month(year_month)
    return f"{year % 100:02d}m{month}"


def monthly_feature_names(config: FeatureConfig) -> list[str]:
    labels = [month_label(m) for m in config.months]
    return [f"{fam}_{lab}" for fam in MONTHLY_FAMILIES for lab in labels]


def numeric_feature_names(config: FeatureConfig) -> list[str]:
    """Numeric columns of the wide table, in output order."""
    return list(STATIC_NUMERIC) + monthly_feature_names(config) + list(YEARLY_FEATURES)


def family_of(feature: str) -> str:
    """Strip a ``_YYmN`` month suffix; other names are returned unchanged."""
    head, _, tail = feature.rpartition("_")
    if head and len(tail) >= 4 and tail[:2].isdigit() and tail[2] == "m" and tail[3:].isdigit():
        return head
    return feature


# -- scalar definitions ------------------------------------------------------


def _guarded(num: float, den: float) -> float:
    return num / den if den != 0 else 0.0


def fraction_b26r(salaries: Iterable[float], cap: float) -> float:
    """Salary mass below the cap versus at/above it, in [-1, 1].

    ``(below - above) / (below + above)``; 0 when there are no salaries.
    """
    if cap <= 0:
        raise ConfigError("cap must be positive")
    below = above = 0.0
    for s in salaries:
        if s < 0:
            raise DataError(f"negative salary {s}")
        if s < cap:
            below += s
        else:
            above += s
    return _guarded(below - above, below + above)


def capital_labor(dividends: float, salaries_plus_profit: float) -> float:
    """Dividends over (salaries + paid profit); 0 for an empty denominator."""
    if dividends < 0 or salaries_plus_profit < 0:
        raise DataError("capital/labor components must be non-negative")
    return _guarded(dividends, salaries_plus_profit)


def fiscal_burdens(records: pd.DataFrame) -> tuple[float, float, float]:
    """(fbs, tbs, fball) for the declarations of one entity-month."""
    if len(records) == 0:
        return 0.0, 0.0, 0.0
    contribs = records[["health_contrib", "pension_contrib", "unemployment_contrib"]].sum(axis=1)
    sal = (records["income_type"] == "salary").to_numpy()
    gross_sal = records["gross_amount"][sal].sum()
    fbs = _guarded(records["tax_paid"][sal].sum() + contribs[sal].sum(), gross_sal)
    tbs = _guarded(records["tax_paid"][sal].sum(), gross_sal)
    fball = _guarded(records["tax_paid"].sum() + contribs.sum(), records["gross_amount"].sum())
    return float(fbs), float(tbs), float(fball)


def scoring_indicator(row: Mapping[str, float], indicator: str = "fball") -> float:
    """Mean of the monthly ``indicator`` columns of one entity row."""
    vals = [float(v) for k, v in row.items() if family_of(k) == indicator and k != indicator]
    if not vals:
        raise DataError(f"no {indicator} columns in row")
    return float(np.mean(vals))


def scoring_indicators(data: Dataset, indicator: str = "fball") -> np.ndarray:
    cols = [i for i, n in enumerate(data.schema.names) if family_of(n) == indicator and n != indicator]
    if not cols:
        raise DataError(f"dataset has no {indicator} columns")
    return data.values[:, cols].mean(axis=1)


# -- declaration tables ------------------------------------------------------


def read_declarations(path: str | Path) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path, dtype={c: str for c in _STRING_COLUMNS}, keep_default_na=False)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise DataError(f"cannot read declarations {path}: {exc}") from None
    return frame


def _prepare(records: pd.DataFrame, config: FeatureConfig) -> pd.DataFrame:
    missing = [c for c in DECLARATION_COLUMNS if c not in records.columns]
    if missing:
        raise DataError(f"declarations missing columns: {missing}")
    df = records.loc[:, list(DECLARATION_COLUMNS)].copy()
    for c in _STRING_COLUMNS:
        df[c] = df[c].astype(str)
    for c in AMOUNT_COLUMNS + ("payer_founded_year", "receiver_birth_year"):
        df[c] = pd.to_numeric(df[c], errors="coerce").astype(np.float64)
        bad = ~np.isfinite(df[c].to_numpy())
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise DataError(f"non-numeric {c} in declaration row {i}")
    for c in AMOUNT_COLUMNS:
        neg = (df[c] < 0).to_numpy()
        if neg.any():
            i = int(np.flatnonzero(neg)[0])
            raise DataError(f"negative {c} in declaration row {i} (tin {df['tin'].iloc[i]})")
    unknown = sorted(set(df["income_type"]) - set(INCOME_TYPES))
    if unknown:
        raise DataError(f"unknown income types: {unknown}")
    months = config.months
    outside = ~df["year_month"].isin(months)
    if outside.any():
        i = int(np.flatnonzero(outside.to_numpy())[0])
        raise DataError(
            f"year_month {df['year_month'].iloc[i]!r} outside window {months[0]}..{months[-1]}"
        )
    years = df["year_month"].str.slice(0, 4).astype(int)
    df["age"] = years - df["receiver_birth_year"]
    df["duties"] = (
        df["tax_paid"] + df["health_contrib"] + df["pension_contrib"] + df["unemployment_contrib"]
    )
    return df


def _ratio(num: pd.Series, den: pd.Series) -> pd.Series:
    den = den.reindex(num.index, fill_value=0.0)
    out = num / den.where(den != 0, 1.0)
    return out.where(den != 0, 0.0)


def _monthly(df: pd.DataFrame, config: FeatureConfig) -> pd.DataFrame:
    """One row per (tin, year_month) present in ``df``, one column per family."""
    keys = ["tin", "year_month"]
    index = pd.MultiIndex.from_frame(df[keys].drop_duplicates()).sort_values()
    out = pd.DataFrame(index=index)

    def reindexed(series: pd.Series) -> pd.Series:
        return series.reindex(index, fill_value=0.0).astype(np.float64)

    is_sal = df["income_type"] == "salary"
    sal = df[is_sal]
    per_person = sal.groupby(keys + ["pid"], sort=True)["gross_amount"].sum()
    g = per_person.groupby(level=[0, 1])
    out["average_salary"] = reindexed(g.mean())
    out["median_salary"] = reindexed(g.median())
    out["stdev_salary"] = reindexed(g.std(ddof=1).fillna(0.0))

    cap = config.contribution_cap
    below = per_person.where(per_person < cap, 0.0).groupby(level=[0, 1]).sum()
    above = per_person.where(per_person >= cap, 0.0).groupby(level=[0, 1]).sum()
    out["fraction_b26r"] = reindexed(_ratio(below - above, below + above))

    gross_sal = reindexed(sal.groupby(keys)["gross_amount"].sum())
    dividends = reindexed(df[df["income_type"] == "dividend"].groupby(keys)["gross_amount"].sum())
    out["capital_labor"] = _ratio(dividends, gross_sal + dividends)

    out["fbs"] = _ratio(reindexed(sal.groupby(keys)["duties"].sum()), gross_sal)
    out["tbs"] = _ratio(reindexed(sal.groupby(keys)["tax_paid"].sum()), gross_sal)
    totals = df.groupby(keys)[["duties", "gross_amount"]].sum()
    out["fball"] = reindexed(_ratio(totals["duties"], totals["gross_amount"]))

    emp = df[df["income_type"].isin(config.employee_income_types)]
    out["total_employees"] = reindexed(emp.groupby(keys)["pid"].nunique())
    out["total_persons"] = reindexed(df.groupby(keys)["pid"].nunique())

    # one age per distinct receiver and month
    people = df.drop_duplicates(keys + ["pid"])
    out["avg_age"] = reindexed(people.groupby(keys)["age"].mean())
    for cat, types in AGE_CATEGORIES.items():
        sub = df[df["income_type"].isin(types)].drop_duplicates(keys + ["pid"])
        out[f"avg_age_{cat}"] = reindexed(sub.groupby(keys)["age"].mean())
    return out[list(MONTHLY_FAMILIES)]


def aggregate_entity_month(records: pd.DataFrame, config: FeatureConfig | None = None) -> dict[str, float]:
    """Monthly family values for the declarations of a single entity-month."""
    config = config or FeatureConfig()
    if len(records) == 0:
        return {fam: 0.0 for fam in MONTHLY_FAMILIES}
    if records["tin"].nunique() != 1 or records["year_month"].nunique() != 1:
        raise DataError("records must share one tin and one year_month")
    row = _monthly(_prepare(records, config), config).iloc[0]
    return {fam: float(row[fam]) for fam in MONTHLY_FAMILIES}


def build_feature_table(declarations: pd.DataFrame, config: FeatureConfig | None = None) -> pd.DataFrame:
    """Wide entity table: ``tin``, static attributes, monthly families, yearly aggregate.

    Rows are sorted by tin. The categorical ``nace`` and ``org_type`` columns
    are kept raw; :func:`to_dataset` expands them.
    """
    config = config or FeatureConfig()
    if declarations is None or len(declarations) == 0:
        raise DataError("no declarations")
    df = _prepare(declarations, config)
    monthly = _monthly(df, config)
    months = config.months
    tins = sorted(df["tin"].unique())

    grid = pd.MultiIndex.from_product([tins, months], names=["tin", "year_month"])
    monthly = monthly.reindex(grid, fill_value=0.0)
    wide = monthly.unstack("year_month")
    wide = wide.reindex(columns=pd.MultiIndex.from_product([list(MONTHLY_FAMILIES), months]))
    wide.columns = [f"{fam}_{month_label(m)}" for fam, m in wide.columns]

    static = (
        df.sort_values(["tin", "year_month"], kind="stable")
        .groupby("tin")[["payer_nace", "payer_org_type", "payer_founded_year"]]
        .first()
        .reindex(tins)
    )
    table = pd.DataFrame({"tin": tins})
    table["tin_age"] = (config.reference_year - static["payer_founded_year"]).to_numpy()
    table["nace"] = static["payer_nace"].to_numpy()
    table["org_type"] = static["payer_org_type"].to_numpy()
    table = pd.concat([table, wide.reset_index(drop=True)], axis=1)

    sal = df[df["income_type"] == "salary"].groupby("tin")["gross_amount"].sum()
    div = df[df["income_type"] == "dividend"].groupby("tin")["gross_amount"].sum()
    sal = sal.reindex(tins, fill_value=0.0)
    div = div.reindex(tins, fill_value=0.0)
    table["capital_labor_12m"] = _ratio(div, sal + div).to_numpy()
    logger.info("built feature table: %d entities x %d months", len(tins), len(months))
    return table


def to_dataset(table: pd.DataFrame) -> Dataset:
    """One-hot expand the categorical entity attributes."""
    return one_hot_encode(table, categorical=list(CATEGORICAL), id_column="tin")


def max_monthly_employees(data: Dataset) -> np.ndarray:
    cols = [i for i, n in enumerate(data.schema.names) if family_of(n) == "total_employees" and n != "total_employees"]
    if not cols:
        raise DataError("dataset has no total_employees columns")
    return data.values[:, cols].max(axis=1)


def split_by_employees(data: Dataset, cutoff: int = 10) -> tuple[Dataset, Dataset]:
    """(entities below the cutoff, entities at or above it) by max monthly employees."""
    large = max_monthly_employees(data) >= cutoff
    return data.take(~large), data.take(large)


@dataclass
class FeatureFiles:
    full: Dataset
    l10: Dataset
    a10: Dataset
    paths: dict[str, Path] = field(default_factory=dict)


def write_feature_files(
    declarations: pd.DataFrame, out_dir: str | Path, config: FeatureConfig | None = None
) -> FeatureFiles:
    """Build the features and write ``features.csv``, ``features_l10.csv``, ``features_a10.csv``."""
    config = config or FeatureConfig()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    full = to_dataset(build_feature_table(declarations, config))
    l10, a10 = split_by_employees(full, config.employee_cutoff)
    paths = {}
    for name, data in (("features", full), ("features_l10", l10), ("features_a10", a10)):
        paths[name] = out_dir / f"{name}.csv"
        data.to_csv(paths[name])
    return FeatureFiles(full, l10, a10, paths)


def read_features(path: str | Path) -> Dataset:
    return read_csv(path, onehot_sources=CATEGORICAL)
