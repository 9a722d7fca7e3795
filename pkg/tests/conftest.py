import pytest

_ACCEPTANCE_LINES = {}


@pytest.fixture(scope="session")
def acceptance_log():
    """Record one PASS/FAIL line per acceptance check for the run summary."""

    def log(number: int, passed: bool, detail: str) -> None:
        _ACCEPTANCE_LINES[number] = (passed, detail)

    return log


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE_LINES):
        passed, detail = _ACCEPTANCE_LINES[number]
        status = "PASS" if passed else "FAIL"
        terminalreporter.line(f"criterion {number:>2} {status}: {detail}")
