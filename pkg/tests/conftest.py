import pytest

VERDICTS = []


@pytest.fixture(scope="session")
def verdict():
    """Record one criterion line; printed in the terminal summary."""
    def record(number, status, detail):
        line = f"criterion {number:>2}: {status:<4} {detail}"
        VERDICTS.append((number, line))
        print(line)
    return record


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(VERDICTS):
        terminalreporter.write_line(line)
