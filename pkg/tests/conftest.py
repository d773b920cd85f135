import pytest

ACCEPTANCE_LINES = {}


@pytest.fixture
def acceptance_report():
    def record(n, passed, detail):
        ACCEPTANCE_LINES[n] = f"criterion {n}: {'PASS' if passed else 'FAIL'}  {detail}"
        print(ACCEPTANCE_LINES[n])
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
