import os
import sys
from pathlib import Path

from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

# Monte Carlo tests run in-process unless the caller asks otherwise.
os.environ.setdefault("QCD_LAB_WORKERS", "1")

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")

import pytest

_acceptance_lines = []


@pytest.fixture(scope="session")
def criterion():
    """``criterion(label, checks)`` records one PASS/FAIL line and asserts every check."""

    def report(label, checks, detail=""):
        bad = [desc for desc, ok in checks if not ok]
        line = f"{label}: {'PASS' if not bad else 'FAIL'}"
        if detail:
            line += f" [{detail}]"
        lines = [line] + [f"    {'ok ' if ok else 'BAD'} {desc}" for desc, ok in checks]
        _acceptance_lines.extend(lines)
        print("\n".join(lines))
        assert not bad, line

    return report


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in _acceptance_lines:
            terminalreporter.write_line(line)
