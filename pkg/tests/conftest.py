import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

# acceptance criterion number -> [title, passed so far, tests seen, details]
_criteria: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion a test belongs to")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    entry = _criteria.setdefault(number, [title, True, set(), []])
    entry[2].add(item.nodeid)
    if report.failed or (report.when == "call" and report.skipped):
        entry[1] = False
    if report.when == "call":
        entry[3].extend(value for name, value in report.user_properties if name == "detail")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, passed, tests, details = _criteria[number]
        extra = f"; {', '.join(details)}" if details else ""
        terminalreporter.write_line(
            f"{'PASS' if passed else 'FAIL'} criterion {number}: {title} ({len(tests)} tests{extra})")
