import warnings

import pytest

from knotsaw.detection import SigmaTooSmall


@pytest.fixture(autouse=True)
def _quiet_sigma_clamp():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SigmaTooSmall)
        yield


def pytest_terminal_summary(terminalreporter):
    from _helpers import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
