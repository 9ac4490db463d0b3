import pytest

VERDICTS = []


@pytest.fixture
def verdict():
    """Record a criterion outcome, then assert it."""

    def record(number: int, ok: bool, detail: str):
        VERDICTS.append((number, ok, detail))
        assert ok, f"criterion {number}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in sorted(VERDICTS, key=lambda v: v[0]):
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
