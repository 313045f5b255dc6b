from __future__ import annotations

import pytest

_LINES_KEY = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``criterion(name, checks)`` where
    ``checks`` maps a description to a bool. Returns True if all pass."""
    lines = request.config.stash.setdefault(_LINES_KEY, [])

    def record(name: str, checks: dict) -> bool:
        ok = all(checks.values())
        failed = [k for k, v in checks.items() if not v]
        detail = "; ".join(checks)
        if not ok:
            passed = [k for k, v in checks.items() if v]
            detail = "failed: " + "; ".join(failed) + (" | passed: " + "; ".join(passed) if passed else "")
        lines.append(f"{name}: {'PASS' if ok else 'FAIL'} ({detail})")
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES_KEY, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(lines):
        terminalreporter.write_line(line)
