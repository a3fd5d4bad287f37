import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

ACCEPTANCE: dict[str, tuple[bool, str]] = {}


@pytest.fixture
def verdict():
    """Record a PASS/FAIL line for one acceptance criterion, then assert it."""

    def record(name: str, ok: bool, detail: str):
        ACCEPTANCE[name] = (bool(ok), detail)
        line = f"{'PASS' if ok else 'FAIL'} {name}: {detail}"
        print(line, file=sys.__stdout__, flush=True)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in ACCEPTANCE:
        ok, detail = ACCEPTANCE[name]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
