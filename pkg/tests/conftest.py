"""Collects outcomes of tests marked ``criterion`` and prints one verdict line per criterion."""

import pytest

_outcomes: dict = {}
_notes: dict = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    cid, title = marker.args
    _outcomes.setdefault(cid, {"title": title, "results": []})
    if report.when == "call" or (report.when == "setup" and not report.passed):
        ok = report.passed and not hasattr(report, "wasxfail")
        _outcomes[cid]["results"].append((item.name, ok))
        _notes.setdefault(cid, []).extend(f"{k}={v}" for k, v in item.user_properties)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(_outcomes, key=lambda c: int(c[1:])):
        entry = _outcomes[cid]
        verdict = "PASS" if entry["results"] and all(ok for _, ok in entry["results"]) else "FAIL"
        notes = "; ".join(_notes.get(cid, []))
        terminalreporter.write_line(f"{cid:>3} {verdict}  {entry['title']}" + (f"  [{notes}]" if notes else ""))
