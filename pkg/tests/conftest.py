import pytest

_VERDICTS: dict[str, tuple[bool, str]] = {}


@pytest.fixture
def verdict():
    """Record one pass/fail line per acceptance criterion, printed after the run."""

    def record(name: str, passed: bool, detail: str) -> bool:
        _VERDICTS[name] = (bool(passed), detail)
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_VERDICTS, key=lambda n: int(n.split()[0][1:])):
        passed, detail = _VERDICTS[name]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
