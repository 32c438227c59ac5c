import sys
from pathlib import Path

import pytest

# make the shared oracles importable from every test module
sys.path.insert(0, str(Path(__file__).parent))

_CRITERIA: dict[int, str] = {}


@pytest.fixture(scope="session")
def criteria():
    """Acceptance tests record one summary line per criterion here."""
    return _CRITERIA


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[num])
