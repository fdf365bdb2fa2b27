import re

CRITERION_RE = re.compile(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)")
_outcomes: dict[tuple[int, str], str] = {}


def pytest_runtest_logreport(report):
    m = CRITERION_RE.search(report.nodeid)
    if not m:
        return
    key = (int(m.group(1)), m.group(2).replace("_", " "))
    if report.failed:
        _outcomes[key] = "FAIL"
    elif report.skipped:
        _outcomes.setdefault(key, "SKIP")
    elif report.when == "call":
        _outcomes.setdefault(key, "PASS")


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for (num, name), outcome in sorted(_outcomes.items()):
        terminalreporter.write_line(f"criterion {num} ({name}): {outcome}")
