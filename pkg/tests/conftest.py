import pytest

_LINES = []


@pytest.fixture
def criterion():
    """Record a one-line verdict for the acceptance summary, then assert it."""
    def report(number, ok, detail):
        _LINES.append((number, ok, detail))
        assert ok, f"criterion {number}: {detail}"
    return report


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in sorted(_LINES, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
