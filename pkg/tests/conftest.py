import pytest

_LINES: list = []


@pytest.fixture(scope="session")
def acceptance():
    """Record one verdict line per acceptance criterion."""

    def record(number: int, title: str, passed: bool, detail: str = "") -> bool:
        verdict = "PASS" if passed else "FAIL"
        _LINES.append((number, f"[{verdict}] criterion {number}: {title}" + (f" ({detail})" if detail else "")))
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_LINES, key=lambda t: t[0]):
        terminalreporter.write_line(line)
