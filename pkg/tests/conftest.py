import pytest

CRITERIA = {
    1: "zero-variance determinism (setting N)",
    2: "variance emerges under W, D, B, A (default seed)",
    3: "isolation of factor streams",
    4: "AUC oracle equivalence",
    5: "statistical-test oracles",
    6: "gradient correctness",
    7: "P-factor mechanics",
    8: "end-to-end replay",
    9: "report fidelity",
}

_outcomes: dict[int, list[str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _outcomes.setdefault(marker.args[0], []).append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, title in CRITERIA.items():
        results = _outcomes.get(n)
        if not results:
            status = "NOT RUN"
        elif all(r == "passed" for r in results):
            status = "PASS"
        else:
            status = "FAIL"
        terminalreporter.write_line(f"criterion {n}: {status:7s} {title} ({len(results or [])} checks)")
