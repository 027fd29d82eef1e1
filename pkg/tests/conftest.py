import pytest

ACCEPTANCE_LINES = {}


@pytest.fixture
def criterion():
    """Record (and print) one acceptance line: ``criterion(n, ok, detail)``."""
    def record(n, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {n:>2}: {detail}"
        ACCEPTANCE_LINES[n] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
