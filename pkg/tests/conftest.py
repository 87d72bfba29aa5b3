import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from lumpflow.constitutive import validation_model
from lumpflow.mesh import build_geometry, generate_structured_unit_square

settings.register_profile(
    "default", deadline=None, max_examples=30, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def model():
    return validation_model()


@pytest.fixture(scope="session")
def geom4():
    return build_geometry(generate_structured_unit_square(4))


@pytest.fixture(scope="session")
def geom2():
    return build_geometry(generate_structured_unit_square(2))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from helpers import VERDICTS

    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for key in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[key])
