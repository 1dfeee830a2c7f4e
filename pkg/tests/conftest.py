import pytest

# criterion id -> (passed, detail); filled by the acceptance tests
ACCEPTANCE_RESULTS: dict = {}


@pytest.fixture
def report(capsys):
    """Record and immediately print one pass/fail line for an acceptance criterion."""
    def _report(criterion: str, passed: bool, detail: str):
        ACCEPTANCE_RESULTS[criterion] = (bool(passed), detail)
        with capsys.disabled():
            print(f"\n[{'PASS' if passed else 'FAIL'}] criterion {criterion}: {detail}")
        return passed
    return _report


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS):
        passed, detail = ACCEPTANCE_RESULTS[key]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] criterion {key}: {detail}")
