import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from faultfilter.cascade import PlantModel
from faultfilter.faultproc import example31_model
from faultfilter.linop import sigma_minus, sigma_z
from faultfilter.wavepacket import Wavepacket

GROUND = np.diag([0.0, 1.0]).astype(complex)


@pytest.fixture
def desk_plant():
    return PlantModel(np.stack([np.zeros((2, 2)), 2 * sigma_z()]), sigma_minus(), GROUND)


@pytest.fixture
def desk_faults():
    return example31_model(0.2)


@pytest.fixture
def photon():
    return Wavepacket.exponential(1.0)


def pytest_terminal_summary(terminalreporter):
    lines = []
    try:
        from test_acceptance import RESULTS
        lines = list(RESULTS)
    except ImportError:
        pass
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
