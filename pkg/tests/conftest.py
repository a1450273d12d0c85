import pytest

_verdicts: list[tuple[int, bool, str]] = []


@pytest.fixture
def verdict():
    """Record a PASS/FAIL line for an acceptance criterion, then assert it."""

    def record(criterion: int, ok: bool, detail: str) -> None:
        _verdicts.append((criterion, bool(ok), detail))
        print(f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}")
        assert ok, f"criterion {criterion}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, ok, detail in sorted(_verdicts, key=lambda v: v[0]):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}")
