import pytest

_results: dict[int, tuple[str, str]] = {}
_details: dict[int, list[str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None or "criterion" not in mark.kwargs:
        return
    n = mark.kwargs["criterion"]
    if report.when != "call" and not (report.failed or report.skipped):
        return
    status = "FAIL" if report.failed else "SKIP" if report.skipped else "PASS"
    prev = _results.get(n, (None, "PASS"))[1]
    # a criterion split over several tests takes its worst outcome
    worst = max(prev, status, key=["PASS", "SKIP", "FAIL"].index)
    _results[n] = (mark.kwargs.get("name", item.name), worst)
    if report.when == "call":
        _details.setdefault(n, []).extend(f"{k}={v}" for k, v in report.user_properties)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        name, status = _results[n]
        extra = ", ".join(_details.get(n, []))
        terminalreporter.write_line(f"{status} criterion {n:2d}: {name}" + (f" ({extra})" if extra else ""))
