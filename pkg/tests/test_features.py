import math
import statistics

import numpy as np
import pandas as pd
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hunod.errors import ConfigError, DataError
from hunod.features import (
    INCOME_TYPES,
    MONTHLY_FAMILIES,
    FeatureConfig,
    aggregate_entity_month,
    build_feature_table,
    capital_labor,
    family_of,
    fiscal_burdens,
    fraction_b26r,
    month_label,
    read_declarations,
    scoring_indicator,
    scoring_indicators,
    split_by_employees,
    to_dataset,
    window_months,
)

from conftest import declaration

CFG = FeatureConfig()
MONTHS = window_months("2016-03", 13)
CATS = {
    "salary": ("salary",), "sick_leave": ("sick_leave",),
    "service_fee": ("service_contract", "temporary_work"), "rent": ("rent",),
    "owner_income": ("dividend",), "author": ("author",), "other": ("interest", "other"),
}


# -- naive oracle: plain Python over row dicts, no shared code -------------------------


def _ratio(a, b):
    return a / b if b != 0 else 0.0


def oracle_month(rows, cap=5000.0):
    """All monthly families for one tin-month, computed straight from the rows."""
    out = {}
    per_person = {}
    for r in rows:
        if r["income_type"] == "salary":
            per_person[r["pid"]] = per_person.get(r["pid"], 0.0) + r["gross_amount"]
    sal = list(per_person.values())
    if sal:
        out["average_salary"] = sum(sal) / len(sal)
        out["median_salary"] = statistics.median(sal)
        out["stdev_salary"] = statistics.stdev(sal) if len(sal) > 1 else 0.0
    else:
        out["average_salary"] = out["median_salary"] = out["stdev_salary"] = 0.0
    below = sum(s for s in sal if s < cap)
    above = sum(s for s in sal if s >= cap)
    out["fraction_b26r"] = _ratio(below - above, below + above)

    def duties(r):
        return r["tax_paid"] + r["health_contrib"] + r["pension_contrib"] + r["unemployment_contrib"]

    sal_rows = [r for r in rows if r["income_type"] == "salary"]
    gross_sal = sum(r["gross_amount"] for r in sal_rows)
    div = sum(r["gross_amount"] for r in rows if r["income_type"] == "dividend")
    out["capital_labor"] = _ratio(div, gross_sal + div)
    out["fbs"] = _ratio(sum(duties(r) for r in sal_rows), gross_sal)
    out["tbs"] = _ratio(sum(r["tax_paid"] for r in sal_rows), gross_sal)
    out["fball"] = _ratio(sum(duties(r) for r in rows), sum(r["gross_amount"] for r in rows))
    out["total_employees"] = float(len({r["pid"] for r in sal_rows}))
    out["total_persons"] = float(len({r["pid"] for r in rows}))

    def mean_age(selected):
        ages = {}
        for r in selected:
            ages.setdefault(r["pid"], int(r["year_month"][:4]) - r["receiver_birth_year"])
        return sum(ages.values()) / len(ages) if ages else 0.0

    out["avg_age"] = mean_age(rows)
    for cat, types in CATS.items():
        out[f"avg_age_{cat}"] = mean_age([r for r in rows if r["income_type"] in types])
    return out


def oracle_entity(rows, cap=5000.0):
    feats = {"tin_age": 2016 - rows[0]["payer_founded_year"]}
    for ym in MONTHS:
        month_rows = [r for r in rows if r["year_month"] == ym]
        vals = oracle_month(month_rows, cap) if month_rows else {}
        label = f"{int(ym[2:4]):02d}m{int(ym[5:])}"
        for fam in MONTHLY_FAMILIES:
            feats[f"{fam}_{label}"] = vals.get(fam, 0.0)
    sal = sum(r["gross_amount"] for r in rows if r["income_type"] == "salary")
    div = sum(r["gross_amount"] for r in rows if r["income_type"] == "dividend")
    feats["capital_labor_12m"] = _ratio(div, sal + div)
    return feats


def random_group(rng, g):
    """Declarations of one entity over a random subset of months."""
    tin = f"T{g:03d}"
    births = {f"P{g}_{j}": int(rng.integers(1940, 2000)) for j in range(6)}
    pids = list(births)
    founded = int(rng.integers(1990, 2016))
    months = [m for m in MONTHS if rng.random() < 0.6] or [MONTHS[0]]
    types = list(INCOME_TYPES)
    rows = []
    for ym in months:
        for _ in range(int(rng.integers(1, 10))):
            itype = "salary" if rng.random() < 0.5 else types[int(rng.integers(len(types)))]
            gross = 0.0 if rng.random() < 0.05 else round(float(rng.uniform(0, 9000)), 2)
            pid = pids[int(rng.integers(len(pids)))]
            shares = rng.uniform(0, 0.25, 4)
            rows.append(declaration(
                tin=tin, pid=pid, year_month=ym, income_type=itype, gross=gross,
                tax=round(gross * shares[0], 2), health=round(gross * shares[1], 2),
                pension=round(gross * shares[2], 2), unemployment=round(gross * shares[3], 2),
                birth=births[pid], payer_founded_year=founded,
                payer_nace=f"N{g % 3}", payer_org_type=f"O{g % 2}",
            ))
    return rows


def _close(a, b):
    return math.isclose(a, b, rel_tol=1e-12, abs_tol=1e-12)


class TestOracle:
    def test_table_matches_oracle_on_random_groups(self, rng):
        groups = [random_group(rng, g) for g in range(100)]
        table = build_feature_table(pd.DataFrame([r for rows in groups for r in rows]), CFG)
        assert len(table) == 100
        mismatches = []
        for rows in groups:
            expected = oracle_entity(rows)
            got = table.loc[table["tin"] == rows[0]["tin"]].iloc[0]
            for name, value in expected.items():
                if not _close(float(got[name]), value):
                    mismatches.append((rows[0]["tin"], name, float(got[name]), value))
        assert not mismatches, mismatches[:5]

    def test_aggregate_entity_month_matches_oracle(self, rng):
        for g in range(20):
            rows = [r for r in random_group(rng, g) if r["year_month"] == MONTHS[0]]
            if not rows:
                continue
            got = aggregate_entity_month(pd.DataFrame(rows), CFG)
            expected = oracle_month(rows)
            assert all(_close(got[k], expected[k]) for k in MONTHLY_FAMILIES), (got, expected)


class TestAggregate:
    def test_salary_stats(self, make_declarations):
        recs = make_declarations([dict(pid=f"P{i}", gross=g) for i, g in enumerate([100, 200, 300])])
        out = aggregate_entity_month(recs)
        assert (out["average_salary"], out["median_salary"], out["stdev_salary"]) == (200, 200, 100)

    def test_single_salary_has_zero_stdev(self, make_declarations):
        assert aggregate_entity_month(make_declarations([dict(gross=700)]))["stdev_salary"] == 0.0

    def test_distinct_counts(self, make_declarations):
        recs = make_declarations([dict(pid="A"), dict(pid="A", income_type="rent")])
        out = aggregate_entity_month(recs)
        assert out["total_employees"] == 1 and out["total_persons"] == 1

    def test_empty_month(self):
        out = aggregate_entity_month(pd.DataFrame([declaration()]).iloc[:0])
        assert set(out.values()) == {0.0}

    def test_no_salary_month(self, make_declarations):
        out = aggregate_entity_month(make_declarations([dict(income_type="dividend")]))
        assert out["average_salary"] == 0.0 and out["fbs"] == 0.0 and out["capital_labor"] == 1.0

    def test_mixed_groups_rejected(self, make_declarations):
        with pytest.raises(DataError):
            aggregate_entity_month(make_declarations([dict(tin="A"), dict(tin="B")]))


class TestScalars:
    def test_b26r_formula(self):
        assert fraction_b26r([100, 200, 5000], 5000) == pytest.approx((300 - 5000) / 5300)
        assert fraction_b26r([100, 200], 150) == pytest.approx((100 - 200) / 300)

    def test_b26r_example(self):
        # below-cap mass 300 against at/above-cap mass 100
        assert fraction_b26r([75, 75, 75, 75, 100], 100) == 0.5
        assert fraction_b26r([100, 200, 100], 150) == 0.0

    def test_b26r_boundaries_exact(self):
        assert fraction_b26r([10, 20, 30], 5000) == 1.0
        assert fraction_b26r([5000, 9000], 5000) == -1.0
        assert fraction_b26r([], 5000) == 0.0
        assert fraction_b26r([0.0, 0.0], 5000) == 0.0

    def test_b26r_errors(self):
        with pytest.raises(ConfigError):
            fraction_b26r([1.0], 0)
        with pytest.raises(DataError):
            fraction_b26r([-1.0], 10)

    @given(st.lists(st.floats(0, 4999), max_size=8), st.lists(st.floats(5000, 1e5), max_size=8))
    def test_b26r_antisymmetric(self, below, above):
        s, o = sum(below), sum(above)
        value = fraction_b26r(below + above, 5000)
        assert -1.0 <= value <= 1.0
        if s + o > 0:
            assert value == pytest.approx(-(o - s) / (o + s), abs=1e-12)

    def test_capital_labor(self):
        assert capital_labor(50, 200) == 0.25
        assert capital_labor(0, 200) == 0.0
        assert capital_labor(0, 0) == 0.0

    def test_fiscal_burdens(self, make_declarations):
        recs = make_declarations([dict(gross=1000, tax=100, health=100, pension=140, unemployment=10)])
        fbs, tbs, fball = fiscal_burdens(recs)
        assert (fbs, tbs) == (pytest.approx(0.35), pytest.approx(0.10))
        assert fball == pytest.approx(0.35)

    def test_fiscal_burdens_dividends_only(self, make_declarations):
        recs = make_declarations([dict(income_type="dividend", gross=1000, tax=150, health=0,
                                       pension=0, unemployment=0)])
        assert fiscal_burdens(recs) == (0.0, 0.0, pytest.approx(0.15))

    def test_fball_single_stream(self, make_declarations):
        recs = make_declarations([dict(income_type="rent", gross=1000, tax=300, health=0,
                                       pension=0, unemployment=0)])
        assert fiscal_burdens(recs)[2] == pytest.approx(0.30)

    def test_scoring_indicator(self):
        labels = [month_label(m) for m in MONTHS]
        assert scoring_indicator({f"fball_{l}": 0.4 for l in labels}) == pytest.approx(0.4)
        row = {f"fball_{l}": (0.3 if i < 12 else 0.0) for i, l in enumerate(labels)}
        assert scoring_indicator(row) == pytest.approx(0.2769, abs=1e-4)
        assert scoring_indicator({f"fball_{l}": 0.0 for l in labels}) == 0.0
        with pytest.raises(DataError):
            scoring_indicator({"fbs_16m3": 1.0})


class TestTable:
    def _two_entities(self):
        rows = []
        for ym in MONTHS:
            rows += [declaration(tin="A", pid=f"A{i}", year_month=ym) for i in range(9)]
            n_b = 10 if ym == "2016-07" else 3
            rows += [declaration(tin="B", pid=f"B{i}", year_month=ym, payer_org_type="17")
                     for i in range(n_b)]
        return pd.DataFrame(rows)

    def test_shape_and_names(self):
        table = build_feature_table(self._two_entities())
        data = to_dataset(table)
        assert len(data) == 2
        assert data.d == 1 + 1 + 2 + len(MONTHLY_FAMILIES) * 13 + 1
        assert "average_salary_16m4" in data.schema.names
        assert "fball_17m3" in data.schema.names
        assert "capital_labor_12m" in data.schema.names
        assert {family_of(n) for n in data.schema.names if "m" in n.rsplit("_", 1)[-1]} >= set(MONTHLY_FAMILIES)

    def test_employee_split_boundary(self):
        data = to_dataset(build_feature_table(self._two_entities()))
        l10, a10 = split_by_employees(data, 10)
        assert l10.ids == ("A",) and a10.ids == ("B",)

    def test_tin_age_uses_window_start(self):
        table = build_feature_table(self._two_entities())
        assert table["tin_age"].tolist() == [11, 11]

    def test_scoring_on_dataset(self):
        data = to_dataset(build_feature_table(self._two_entities()))
        np.testing.assert_allclose(scoring_indicators(data), [0.41, 0.41])

    def test_errors(self, make_declarations):
        with pytest.raises(DataError, match="no declarations"):
            build_feature_table(pd.DataFrame())
        with pytest.raises(DataError, match="outside window"):
            build_feature_table(make_declarations([dict(year_month="2015-01")]))
        with pytest.raises(DataError, match="negative"):
            build_feature_table(make_declarations([dict(gross=-5.0)]))
        with pytest.raises(DataError, match="unknown income types"):
            build_feature_table(make_declarations([dict(income_type="bonus")]))
        with pytest.raises(DataError, match="missing columns"):
            build_feature_table(make_declarations([{}]).drop(columns=["tax_paid"]))

    def test_read_declarations(self, tmp_path, make_declarations):
        make_declarations([dict(pid="007")]).to_csv(tmp_path / "d.csv", index=False)
        frame = read_declarations(tmp_path / "d.csv")
        assert frame["pid"].iloc[0] == "007"
        with pytest.raises(DataError):
            read_declarations(tmp_path / "missing.csv")
