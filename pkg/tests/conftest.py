import re

import pytest

ACCEPTANCE_FILE = "test_acceptance.py"
_ID = re.compile(r"::test_acceptance_(\d+)_")

_acceptance: dict = {}
_property_outcomes: dict = {}


def _acceptance_id(nodeid: str):
    m = _ID.search(nodeid)
    return int(m.group(1)) if m and ACCEPTANCE_FILE in nodeid else None


def pytest_collection_modifyitems(session, config, items):
    # the property-suite criterion runs last so it can see the other modules' outcomes
    last = [it for it in items if _acceptance_id(it.nodeid) == 10]
    items[:] = [it for it in items if it not in last] + last


def pytest_runtest_logreport(report):
    if report.when != "call" and not report.failed:
        return
    ok = report.passed if report.when == "call" else False
    k = _acceptance_id(report.nodeid)
    if k is not None:
        _acceptance[k] = _acceptance.get(k, True) and ok
    elif ACCEPTANCE_FILE not in report.nodeid:
        _property_outcomes[report.nodeid] = _property_outcomes.get(report.nodeid, True) and ok


@pytest.fixture
def property_suite_outcomes():
    """Outcomes of the non-acceptance tests already run in this session."""
    return _property_outcomes


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_acceptance):
        terminalreporter.write_line(f"ACCEPTANCE {k}: {'PASS' if _acceptance[k] else 'FAIL'}")
