import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

# criterion key -> titles, outcome and measured details, in first-seen order
_CRITERIA: dict = {}


def _entry(item):
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return None
    key = mark.args[0]
    return _CRITERIA.setdefault(key, {"titles": [], "ok": True, "details": [], "ran": False})


def pytest_collection_modifyitems(items):
    for item in items:
        entry = _entry(item)
        if entry is not None:
            entry["titles"].append(item.get_closest_marker("acceptance").args[1])


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    entry = _entry(item)
    if entry is None:
        return
    if report.when == "call":
        entry["ran"] = True
        entry["details"] += [v for k, v in item.user_properties if k == "detail"]
    if report.failed or (report.when == "call" and report.skipped):
        entry["ok"] = False


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for i, (key, entry) in enumerate(_CRITERIA.items(), 1):
        status = ("PASS" if entry["ok"] else "FAIL") if entry["ran"] else "NOT RUN"
        detail = f" [{'; '.join(entry['details'])}]" if entry["details"] else ""
        terminalreporter.write_line(f"{status} {i:2d} {key}: {' | '.join(entry['titles'])}{detail}")
