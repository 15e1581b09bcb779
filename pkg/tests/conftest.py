import pytest

_KEY = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one acceptance line and fail the test when the check is red."""
    lines = request.config.stash.setdefault(_KEY, [])

    def record(criterion: int, title: str, ok: bool, detail: str) -> None:
        lines.append(f"criterion {criterion:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
        assert ok, f"criterion {criterion} ({title}) failed: {detail}"

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_KEY, [])
    if lines:
        terminalreporter.section("acceptance")
        for line in sorted(lines):
            terminalreporter.write_line(line)
