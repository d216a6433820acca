import pytest

_CRITERIA: list[tuple[int, bool, str]] = []


@pytest.fixture(scope="session")
def criterion_log():
    """Record one verdict line per acceptance criterion."""

    def record(number: int, passed: bool, detail: str) -> bool:
        _CRITERIA.append((number, bool(passed), detail))
        print(f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(_CRITERIA):
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {detail}")
