import pytest

_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    number, title = mark.args
    entry = _RESULTS.setdefault(number, {"title": title, "passed": 0, "failed": 0, "tests": []})
    if rep.when == "call" or rep.failed or rep.skipped:
        entry["tests"].append(item.name)
        if rep.passed:
            entry["passed"] += 1
        else:
            entry["failed"] += 1


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        e = _RESULTS[number]
        status = "PASS" if e["failed"] == 0 and e["passed"] > 0 else "FAIL"
        terminalreporter.write_line(f"criterion {number} ({e['title']}): {status} "
                                    f"[{e['passed']} passed, {e['failed']} failed]")
