import time

import pytest

_results: list[tuple[str, str, float]] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_call(item):
    start = time.perf_counter()
    yield
    item.user_properties.append(("elapsed", time.perf_counter() - start))


def pytest_runtest_logreport(report):
    marker = getattr(report, "criterion", None)
    if marker and report.when == "call":
        elapsed = dict(report.user_properties).get("elapsed", 0.0)
        _results.append((marker, "PASS" if report.passed else "FAIL", elapsed))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    mark = item.get_closest_marker("criterion")
    if mark:
        n, title = mark.args
        outcome.get_result().criterion = f"criterion {n}: {title}"


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for name, verdict, elapsed in sorted(_results, key=lambda r: int(r[0].split()[1].rstrip(":"))):
        terminalreporter.write_line(f"{verdict}  {name}  ({elapsed:.1f}s)")
