import pytest

#: one line per acceptance check, printed in the terminal summary
ACCEPTANCE_LINES = []


@pytest.fixture(scope='session')
def verdict():
    """Record a PASS/FAIL line for an acceptance check and fail the test if needed."""
    def record(number: int, title: str, ok: bool, detail: str):
        line = f"{'PASS' if ok else 'FAIL'} [{number:2d}] {title}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section('acceptance criteria')
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split('[')[1].split(']')[0])):
            terminalreporter.write_line(line)
