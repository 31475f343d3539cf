"""Collects one verdict line per acceptance criterion and prints them in
the terminal summary."""

import pytest

_LINES = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_LINES] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n = marker.args[0]
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        verdict = "PASS" if rep.passed else "SKIP" if rep.skipped else "FAIL"
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        item.config.stash[_LINES][n] = f"criterion {n:>2}: {verdict}  {detail}".rstrip()


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash[_LINES]
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(lines):
        terminalreporter.write_line(lines[n])
