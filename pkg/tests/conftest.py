import pytest

_acceptance: dict[str, str] = {}  # criterion title -> status


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if item.module.__name__.endswith("test_acceptance") and item.function.__doc__:
        title = item.function.__doc__.strip().splitlines()[0]
        if report.when == "call" or report.failed:
            status = "FAIL" if report.failed else ("SKIP" if report.skipped else "PASS")
            if _acceptance.get(title) != "FAIL":
                _acceptance[title] = status


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for title, status in sorted(_acceptance.items(), key=lambda kv: int(kv[0].split(".")[0])):
        terminalreporter.write_line(f"[{status}] {title}")
