"""Per-criterion PASS/FAIL lines for tests marked ``criterion``."""

import pytest

_results = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or not report.passed:
        number, title = marker.args
        entry = _results.setdefault(number, {"title": title, "ok": True, "seconds": 0.0})
        entry["ok"] = entry["ok"] and report.passed
        entry["seconds"] += report.duration


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        entry = _results[number]
        verdict = "PASS" if entry["ok"] else "FAIL"
        terminalreporter.write_line(f"{verdict} criterion {number}: {entry['title']} ({entry['seconds']:.2f} s)")
