import numpy as np
import pytest

from srcloc import geometry as geo


@pytest.fixture(scope="session")
def coarse_lf():
    """Three-shell lead field on a 20 mm lattice (~200 voxels, 61 sensors)."""
    return geo.default_setup(spacing_mm=20.0)


@pytest.fixture(scope="session")
def desk_lf():
    """Desk-scale training lead field: 10 mm lattice, standard conductivities."""
    return geo.default_setup()


@pytest.fixture(scope="session")
def desk_lf_test():
    """Desk-scale test lead field with perturbed conductivities."""
    return geo.default_setup(conductivities=geo.TEST_CONDUCTIVITIES)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def coarse_lf_test():
    """Coarse lattice with perturbed conductivities (held-out forward model)."""
    return geo.default_setup(spacing_mm=20.0, conductivities=geo.TEST_CONDUCTIVITIES)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
