import pytest

_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record a one-line pass/fail verdict and assert it."""

    def _record(label: str, ok: bool, detail: str = ""):
        line = f"[{'PASS' if ok else 'FAIL'}] {label}: {detail}".rstrip(": ")
        _LINES.append(line)
        print(line)
        assert ok, line

    return _record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
