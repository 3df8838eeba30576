"""Shared fixtures: the acceptance report printed after the run."""

import pytest

_ACCEPTANCE_LOG: list[tuple[str, bool, str]] = []


@pytest.fixture
def criterion():
    """Record one acceptance line and assert it; one call per criterion."""

    def _record(name: str, ok, detail: str):
        _ACCEPTANCE_LOG.append((name, bool(ok), detail))
        assert ok, f"{name}: {detail}"

    return _record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_LOG:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for name, ok, detail in _ACCEPTANCE_LOG:
        status = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"{status} {name}: {detail}")
