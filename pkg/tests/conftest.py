import numpy as np
import pandas as pd
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

_ACCEPTANCE: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion")


def pytest_runtest_logreport(report):
    marker = getattr(report, "acceptance", None)
    if marker is None:
        return
    number, title = marker
    failed = report.failed
    if report.when == "call" or failed:
        prev = _ACCEPTANCE.get(number, (title, "PASS"))[1]
        status = "FAIL" if failed or prev == "FAIL" else ("SKIP" if report.skipped else "PASS")
        _ACCEPTANCE[number] = (title, status)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("acceptance")
    if marker is not None:
        outcome.get_result().acceptance = tuple(marker.args)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, status = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d} {status}: {title}")


def declaration(tin="T1", pid="P1", year_month="2016-03", income_type="salary", gross=1000.0,
                tax=None, health=None, pension=None, unemployment=None, birth=1980, **extra):
    """One declaration row with statutory-looking duties unless given."""
    row = {
        "tin": tin, "pid": pid, "year_month": year_month, "income_type": income_type,
        "gross_amount": gross,
        "tax_paid": 0.1 * gross if tax is None else tax,
        "health_contrib": 0.1 * gross if health is None else health,
        "pension_contrib": 0.2 * gross if pension is None else pension,
        "unemployment_contrib": 0.01 * gross if unemployment is None else unemployment,
        "payer_nace": "6201", "payer_org_type": "14", "payer_founded_year": 2005,
        "receiver_birth_year": birth, "receiver_gender": "F", "receiver_municipality": "70",
    }
    row.update(extra)
    return row


@pytest.fixture
def make_declarations():
    def make(rows):
        return pd.DataFrame([declaration(**r) for r in rows])
    return make


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
