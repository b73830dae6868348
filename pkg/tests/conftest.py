import numpy as np
import pytest

from holosde.model import make_fiber_chain, make_pendulum, make_sphere_langevin
from holosde.stepper import StepperConfig


@pytest.fixture
def pendulum():
    return make_pendulum(1.0)


@pytest.fixture
def free_pendulum():
    return make_pendulum(0.0)


@pytest.fixture
def fiber3():
    return make_fiber_chain(3, 1.0)


@pytest.fixture
def langevin():
    return make_sphere_langevin()


@pytest.fixture
def config():
    return StepperConfig()


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def unit_circle(theta):
    return np.array([np.cos(theta), np.sin(theta)])



def pytest_terminal_summary(terminalreporter):
    import sys

    mod = next((m for name, m in sys.modules.items() if name.endswith("test_acceptance")), None)
    lines = getattr(mod, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
