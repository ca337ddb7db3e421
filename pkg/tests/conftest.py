import numpy as np
import pytest

from smashnas.arch import SearchSpaceConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def desk():
    return SearchSpaceConfig.desk()


@pytest.fixture
def tiny():
    """Small space with enough room for canonical patterns on 8x8 inputs."""
    return SearchSpaceConfig.desk(num_blocks=1, N_max=8, in_channels=2)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    verdicts = getattr(module, "VERDICTS", None)
    if verdicts:
        terminalreporter.section("acceptance criteria")
        for number in sorted(verdicts):
            terminalreporter.write_line(verdicts[number])
