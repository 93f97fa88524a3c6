import pytest

_CRITERIA = []


@pytest.fixture
def criterion():
    """Record a named pass/fail line, then assert it."""

    def check(name, ok, detail=""):
        ok = bool(ok)
        _CRITERIA.append((name, ok, detail))
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        assert ok, f"{name}: {detail}"

    return check


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _CRITERIA:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
