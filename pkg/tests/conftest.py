import pytest

_ACCEPTANCE = []


@pytest.fixture
def report():
    """Record one pass/fail line for the acceptance summary."""

    def _report(criterion, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        return ok

    return _report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
