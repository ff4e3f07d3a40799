import pytest

_VERDICTS: list[tuple[str, bool, str]] = []


@pytest.fixture
def verdict():
    """Record one pass/fail line for the terminal summary, then assert it."""
    def record(name: str, ok: bool, detail: str = ""):
        _VERDICTS.append((name, bool(ok), detail))
        print(f"{name}: {'PASS' if ok else 'FAIL'} {detail}")
        assert ok, f"{name}: {detail}"
    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in sorted(_VERDICTS, key=lambda v: int(v[0].split()[1])):
        terminalreporter.write_line(f"{name}: {'PASS' if ok else 'FAIL'}  {detail}")
