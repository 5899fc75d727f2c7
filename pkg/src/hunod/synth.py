"""Seeded synthetic declaration populations with planted anomalous entities.

Randomness comes from numpy's PCG64 bit generator seeded with
``GeneratorConfig.seed``, so output is identical across platforms for a given
numpy major version. Entities are generated one at a time in TIN order and
every draw is taken from the single generator in a fixed sequence.

Normal entities pay monthly salaries drawn from sector-specific log-normals
with statutory tax and social contributions (contributions are levied on the
salary up to the cap of five average salaries). Some normal entities also pay
non-salary income (rent, author fees, service contracts, ...) or an annual
dividend. Four anomaly kinds can be planted:

``cap_arbitrage``
    A few employees are paid ``magnitude`` times the contribution cap, the
    rest a minimal wage.
``dividend_substitution``
    Monthly dividends worth ``magnitude`` times the monthly payroll.
``low_fiscal_burden``
    All taxes and contributions divided by ``magnitude``.
``sparse_payments``
    Payments only in about ``13 / magnitude`` of the months.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from hunod.errors import ConfigError
from hunod.features import (
    DECLARATION_COLUMNS,
    FeatureConfig,
    build_feature_table,
    family_of,
    window_months,
)

logger = logging.getLogger(__name__)

ANOMALY_KINDS = ("cap_arbitrage", "dividend_substitution", "low_fiscal_burden", "sparse_payments")

TAX_RATE = 0.10
HEALTH_RATE = 0.103
PENSION_RATE = 0.26
UNEMPLOYMENT_RATE = 0.0075
DIVIDEND_TAX = 0.15
SICK_PAY_FRACTION = 0.65
MIN_WAGE_FRACTION = 0.3
# contributions on salary are levied on at least this share of the average salary
MIN_BASE_FRACTION = 0.3
TOKEN_WAGE_FRACTION = 0.1
# monthly chance that a renter also pays some other (non-salary) income
RENTER_SIDE_INCOME_PROB = 0.0

# income type -> (tax rate, contribution-rate multiplier) on the gross amount
_OTHER_INCOME_DUTIES = {
    "rent": (0.15, 0.0),
    "author": (0.10, 0.5),
    "service_contract": (0.16, 0.8),
    "temporary_work": (0.16, 0.8),
    "interest": (0.15, 0.0),
    "other": (0.20, 0.0),
}

DEFAULT_SECTORS = (
    ("4711", 0.20, 0.80),
    ("4941", 0.12, 0.95),
    ("5610", 0.12, 0.75),
    ("6201", 0.08, 1.60),
    ("4120", 0.10, 1.05),
    ("2511", 0.08, 1.00),
    ("6920", 0.08, 1.25),
    ("8621", 0.06, 1.30),
    ("0111", 0.06, 0.70),
    ("1071", 0.10, 0.85),
)
DEFAULT_ORG_TYPES = (("14", 0.55), ("17", 0.25), ("10", 0.12), ("22", 0.08))


@dataclass(frozen=True)
class AnomalySpec:
    kind: str
    rate: float
    magnitude: float = 3.0

    def __post_init__(self):
        if self.kind not in ANOMALY_KINDS:
            raise ConfigError(f"unknown anomaly kind {self.kind!r}; expected one of {ANOMALY_KINDS}")
        if not 0.0 < self.rate < 1.0:
            raise ConfigError(f"anomaly rate must lie in (0, 1), got {self.rate}")
        if self.magnitude <= 1.0:
            raise ConfigError(f"anomaly magnitude must exceed 1, got {self.magnitude}")


DEFAULT_PLAN = (
    AnomalySpec("cap_arbitrage", 0.002, 3.0),
    AnomalySpec("dividend_substitution", 0.002, 8.0),
    AnomalySpec("low_fiscal_burden", 0.002, 5.0),
    AnomalySpec("sparse_payments", 0.002, 3.0),
)


@dataclass(frozen=True)
class GeneratorConfig:
    seed: int = 42
    n_entities: int = 5000
    window_start: str = "2016-03"
    months: int = 13
    average_salary: float = 1000.0
    sectors: tuple[tuple[str, float, float], ...] = DEFAULT_SECTORS
    org_types: tuple[tuple[str, float], ...] = DEFAULT_ORG_TYPES
    large_share: float = 0.12
    mixed_income_share: float = 0.25
    dividend_payer_share: float = 0.20
    sick_leave_prob: float = 0.02
    # normal entities renting premises from an individual; rent is taxed lightly, so
    # the entities paying the highest rents have a low overall fiscal burden
    renter_share: float = 0.03
    rent_ratio: tuple[float, float] = (1.15, 1.4)
    landlord_birth_years: tuple[int, int] = (1960, 1983)
    anomaly_plan: tuple[AnomalySpec, ...] = DEFAULT_PLAN

    def __post_init__(self):
        if self.n_entities <= 0:
            raise ConfigError("n_entities must be positive")
        if self.months != 13:
            raise ConfigError("the declaration window spans 13 months")
        plan = tuple(
            a if isinstance(a, AnomalySpec) else AnomalySpec(**a) for a in self.anomaly_plan
        )
        object.__setattr__(self, "anomaly_plan", plan)
        if sum(a.rate for a in plan) >= 1.0:
            raise ConfigError("anomaly rates must sum to less than 1")
        if len({a.kind for a in plan}) != len(plan):
            raise ConfigError("each anomaly kind may appear once in the plan")

    @property
    def cap(self) -> float:
        return 5.0 * self.average_salary

    def feature_config(self) -> FeatureConfig:
        return FeatureConfig(window_start=self.window_start, n_months=self.months,
                             average_salary=self.average_salary)


def load_plan(path: str | Path) -> tuple[AnomalySpec, ...]:
    """Read a JSON list of ``{"kind", "rate", "magnitude"}`` objects."""
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read anomaly plan {path}: {exc}") from None
    if isinstance(raw, dict):
        raw = raw.get("anomaly_plan", [])
    try:
        return tuple(AnomalySpec(**item) for item in raw)
    except TypeError as exc:
        raise ConfigError(f"bad anomaly plan entry: {exc}") from None


class _Builder:
    """Column-wise accumulator for declaration rows."""

    def __init__(self):
        self.cols: dict[str, list] = {c: [] for c in DECLARATION_COLUMNS}

    def add(self, n, **cols):
        for k, v in cols.items():
            if np.ndim(v) == 0:
                v = [v] * n
            self.cols[k].extend(v)

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.cols, columns=list(DECLARATION_COLUMNS))


def _duties(gross: np.ndarray, cap: float, tax_rate: float, contrib_mult: float, divisor: float,
            floor: np.ndarray | float = 0.0):
    base = np.clip(gross, floor, cap) * contrib_mult
    tax = np.round(gross * tax_rate / divisor, 2)
    health = np.round(base * HEALTH_RATE / divisor, 2)
    pension = np.round(base * PENSION_RATE / divisor, 2)
    unemp = np.round(base * UNEMPLOYMENT_RATE / divisor, 2)
    return tax, health, pension, unemp


def generate(config: GeneratorConfig | None = None) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Return (declarations, ground_truth).

    ``ground_truth`` has columns ``tin`` and ``kind`` for every planted entity.
    """
    cfg = config or GeneratorConfig()
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    months = window_months(cfg.window_start, cfg.months)
    n = cfg.n_entities
    width = max(6, len(str(n)))
    tins = [f"T{i:0{width}d}" for i in range(1, n + 1)]

    kinds: dict[int, AnomalySpec] = {}
    order = rng.permutation(n)
    start = 0
    for spec in cfg.anomaly_plan:
        count = max(1, int(round(spec.rate * n)))
        for idx in order[start:start + count]:
            kinds[int(idx)] = spec
        start += count
    if start >= n:
        raise ConfigError("anomaly plan leaves no normal entities")

    codes = [s[0] for s in cfg.sectors]
    sector_w = np.array([s[1] for s in cfg.sectors], dtype=float)
    sector_mult = {s[0]: s[2] for s in cfg.sectors}
    org_codes = [o[0] for o in cfg.org_types]
    org_w = np.array([o[1] for o in cfg.org_types], dtype=float)
    municipalities = [f"{70000 + 10 * k}" for k in range(30)]
    avg, cap = cfg.average_salary, cfg.cap
    ref_year = int(months[0][:4])

    out = _Builder()
    for e, tin in enumerate(tins):
        spec = kinds.get(e)
        kind = spec.kind if spec else None
        nace = codes[rng.choice(len(codes), p=sector_w / sector_w.sum())]
        org = org_codes[rng.choice(len(org_codes), p=org_w / org_w.sum())]
        founded = int(rng.integers(1990, ref_year))
        if rng.random() < cfg.large_share:
            n_emp = int(rng.integers(10, 60))
        else:
            n_emp = int(rng.integers(1, 10))
        level = avg * sector_mult[nace] * float(np.exp(rng.normal(0.0, 0.2)))
        base = level * np.exp(rng.normal(0.0, 0.3, n_emp))
        base = np.clip(base, MIN_WAGE_FRACTION * avg, 0.9 * cap)
        if kind == "cap_arbitrage":
            k = max(1, int(round(0.3 * n_emp)))
            base[:] = MIN_WAGE_FRACTION * avg
            base[:k] = spec.magnitude * cap * np.exp(rng.normal(0.0, 0.05, k))
        elif kind == "dividend_substitution":
            # staff are declared at a token wage, the rest is paid out as dividends
            base[:] = TOKEN_WAGE_FRACTION * avg
        births = rng.integers(1955, 1999, n_emp)
        genders = np.where(rng.random(n_emp) < 0.5, "M", "F")
        munis = [municipalities[i] for i in rng.integers(0, len(municipalities), n_emp)]
        emp_pids = [f"{tin}E{j:03d}" for j in range(n_emp)]
        mixed = rng.random() < cfg.mixed_income_share
        div_month = int(rng.integers(0, len(months))) if rng.random() < cfg.dividend_payer_share else -1
        div_share = float(rng.uniform(0.02, 0.10))
        owner_birth = int(rng.integers(1950, 1990))
        owner_muni = municipalities[int(rng.integers(0, len(municipalities)))]
        active = np.ones(len(months), dtype=bool)
        if kind == "sparse_payments":
            n_active = max(1, int(round(len(months) / spec.magnitude)))
            active[:] = False
            active[rng.choice(len(months), n_active, replace=False)] = True
        rent_ratio = float(rng.uniform(*cfg.rent_ratio))
        renter = rng.random() < cfg.renter_share and kind is None
        landlord_birth = int(rng.integers(*cfg.landlord_birth_years))
        divisor = spec.magnitude if kind == "low_fiscal_burden" else 1.0
        static = dict(tin=tin, payer_nace=nace, payer_org_type=org, payer_founded_year=founded)

        for mi, ym in enumerate(months):
            noise = 1.0 + rng.normal(0.0, 0.02, n_emp)
            sick = rng.random(n_emp) < cfg.sick_leave_prob
            sick_part = rng.uniform(0.2, 0.8, n_emp)
            if not active[mi]:
                continue
            full = base * noise
            # sick days are paid as a separate sick-leave declaration for part of the month
            sick_days = np.where(sick, sick_part, 0.0)
            gross = np.round(full * (1.0 - sick_days), 2)
            # minimum contribution base, pro rata for partial months
            floor = MIN_BASE_FRACTION * avg * (1.0 - sick_days)
            self_rows = [(gross, "salary", np.ones(n_emp, dtype=bool), floor)]
            if sick.any():
                self_rows.append((np.round(full * sick_days * SICK_PAY_FRACTION, 2), "sick_leave", sick, 0.0))
            for amounts, itype, mask, low in self_rows:
                amounts = amounts[mask]
                low = low[mask] if isinstance(low, np.ndarray) else low
                tax, health, pension, unemp = _duties(amounts, cap, TAX_RATE, 1.0, divisor, low)
                out.add(
                    len(amounts), **static, pid=[p for p, k in zip(emp_pids, mask) if k],
                    year_month=ym, income_type=itype,
                    gross_amount=amounts.tolist(), tax_paid=tax.tolist(),
                    health_contrib=health.tolist(), pension_contrib=pension.tolist(),
                    unemployment_contrib=unemp.tolist(), receiver_birth_year=births[mask].tolist(),
                    receiver_gender=genders[mask].tolist(),
                    receiver_municipality=[m for m, k in zip(munis, mask) if k],
                )
            payroll = float(gross.sum())
            side_p = RENTER_SIDE_INCOME_PROB if renter else (0.5 if mixed else 0.0)
            if side_p > 0 and rng.random() < side_p:
                n_pay = int(rng.integers(1, 4))
                types = [list(_OTHER_INCOME_DUTIES)[i] for i in rng.integers(0, len(_OTHER_INCOME_DUTIES), n_pay)]
                amounts = np.round(level * 0.3 * np.exp(rng.normal(0.0, 0.5, n_pay)), 2)
                ext = rng.integers(0, 5, n_pay)
                for t, amt, x in zip(types, amounts, ext):
                    rate, mult = _OTHER_INCOME_DUTIES[t]
                    g = np.array([amt])
                    tx, h, p, u = _duties(g, cap, rate, mult, divisor)
                    out.add(
                        1, **static, pid=f"{tin}X{x}", year_month=ym, income_type=t,
                        gross_amount=float(amt), tax_paid=float(tx[0]), health_contrib=float(h[0]),
                        pension_contrib=float(p[0]), unemployment_contrib=float(u[0]),
                        receiver_birth_year=1950 + 7 * int(x), receiver_gender="M" if x % 2 else "F",
                        receiver_municipality=municipalities[int(x)],
                    )
            if renter:
                g = np.array([round(rent_ratio * payroll, 2)])
                tx, h, p, u = _duties(g, cap, *_OTHER_INCOME_DUTIES["rent"], divisor)
                out.add(
                    1, **static, pid=f"{tin}R", year_month=ym, income_type="rent",
                    gross_amount=float(g[0]), tax_paid=float(tx[0]), health_contrib=float(h[0]),
                    pension_contrib=float(p[0]), unemployment_contrib=float(u[0]),
                    receiver_birth_year=landlord_birth, receiver_gender="F",
                    receiver_municipality=owner_muni,
                )
            dividend = 0.0
            if kind == "dividend_substitution":
                dividend = spec.magnitude * payroll
            elif mi == div_month:
                dividend = div_share * payroll * len(months)
            if dividend > 0:
                g = np.array([round(dividend, 2)])
                tx, h, p, u = _duties(g, cap, DIVIDEND_TAX, 0.0, divisor)
                out.add(
                    1, **static, pid=f"{tin}O", year_month=ym, income_type="dividend",
                    gross_amount=float(g[0]), tax_paid=float(tx[0]), health_contrib=0.0,
                    pension_contrib=0.0, unemployment_contrib=0.0,
                    receiver_birth_year=owner_birth, receiver_gender="M",
                    receiver_municipality=owner_muni,
                )

    declarations = out.frame()
    truth = pd.DataFrame(
        sorted((tins[i], s.kind) for i, s in kinds.items()), columns=["tin", "kind"]
    )
    logger.info(
        "generated %d declarations for %d entities (%d planted anomalies, seed %d)",
        len(declarations), n, len(truth), cfg.seed,
    )
    return declarations, truth


def write_outputs(declarations: pd.DataFrame, truth: pd.DataFrame, out: str | Path,
                  truth_path: str | Path | None = None) -> tuple[Path, Path]:
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    truth_path = Path(truth_path) if truth_path else out.with_name("ground_truth.csv")
    declarations.to_csv(out, index=False, float_format="%.2f", lineterminator="\n")
    truth.to_csv(truth_path, index=False, lineterminator="\n")
    return out, truth_path


# -- separation check ---------------------------------------------------------


def targeted_feature(table: pd.DataFrame, kind: str) -> pd.Series:
    """The per-entity quantity an anomaly kind is designed to distort."""
    def family(name):
        return table[[c for c in table.columns if family_of(c) == name and c != name]]

    if kind == "cap_arbitrage":
        values = family("fraction_b26r").mean(axis=1)
    elif kind == "dividend_substitution":
        values = table["capital_labor_12m"]
    elif kind == "low_fiscal_burden":
        values = family("fball").mean(axis=1)
    elif kind == "sparse_payments":
        values = (family("total_persons") > 0).sum(axis=1).astype(float)
    else:
        raise ConfigError(f"unknown anomaly kind {kind!r}")
    return pd.Series(values.to_numpy(dtype=float), index=table["tin"].to_numpy())


def separation(declarations: pd.DataFrame, truth: pd.DataFrame,
               config: GeneratorConfig | None = None) -> dict[str, float]:
    """Smallest distance, in unaffected-population standard deviations, between
    a planted entity's targeted feature and the normal-population mean, per kind.

    A zero population deviation with a nonzero gap counts as infinite separation.
    """
    cfg = config or GeneratorConfig()
    table = build_feature_table(declarations, cfg.feature_config())
    planted = set(truth["tin"])
    result = {}
    for kind, group in truth.groupby("kind"):
        values = targeted_feature(table, kind)
        normal = values[~values.index.isin(planted)]
        mu, sd = float(normal.mean()), float(normal.std(ddof=0))
        gaps = np.abs(values.loc[list(group["tin"])].to_numpy() - mu)
        gap = float(gaps.min())
        result[kind] = gap / sd if sd > 0 else (np.inf if gap > 0 else 0.0)
    return result


def config_dict(cfg: GeneratorConfig) -> dict:
    d = asdict(cfg)
    d["anomaly_plan"] = [asdict(a) for a in cfg.anomaly_plan]
    return d
