import numpy as np
import pytest

from mechlab.core import MidrInstance


def single_item() -> MidrInstance:
    """One item; agent 1 values it at 10, agent 2 at 7."""
    return MidrInstance(("give1", "give2"), [[10.0, 0.0], [0.0, 7.0]], np.eye(2))


@pytest.fixture
def item():
    return single_item()


# acceptance criteria report one line each; collected here and printed at the end
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
