from collections import defaultdict

import pytest

_criteria: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")
    config.addinivalue_line("markers", "slow: long-running test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    entry = _criteria.setdefault(number, {"title": title, "outcomes": defaultdict(int)})
    if report.when == "call" or (report.when == "setup" and not report.passed):
        entry["outcomes"]["passed" if report.passed else "skipped" if report.skipped else "failed"] += 1


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        entry = _criteria[number]
        counts = entry["outcomes"]
        if counts["failed"]:
            verdict = "FAIL"
        elif counts["passed"] and not counts["skipped"]:
            verdict = "PASS"
        else:
            verdict = "INCOMPLETE"
        detail = ", ".join(f"{k} {v}" for k, v in sorted(counts.items()) if v)
        terminalreporter.write_line(f"criterion {number}: {verdict}  {entry['title']}  ({detail})")
