import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from textfusion.embeddings import load_fixture  # noqa: E402


@pytest.fixture(scope="session")
def table():
    return load_fixture()


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
