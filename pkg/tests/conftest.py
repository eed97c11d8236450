"""Shared pytest hooks: acceptance results are echoed in the terminal summary."""
import pytest

_ACCEPTANCE = {}


@pytest.fixture
def acceptance():
    """Callable ``(key, passed, detail)`` that records one acceptance line and prints it."""
    def record(key, passed, detail):
        line = f"{key} {'PASS' if passed else 'FAIL'}: {detail}"
        _ACCEPTANCE[key] = line
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[key])
