import numpy as np
import pytest

from beamgnn import dataset as D
from beamgnn.geometry import BeamParams, MeshResolution, build_template, instantiate_mesh


@pytest.fixture(scope="session")
def template21():
    return build_template(MeshResolution(2, 1))


@pytest.fixture(scope="session")
def mid_params():
    return BeamParams.midpoint()


@pytest.fixture(scope="session")
def mesh21(template21, mid_params):
    return instantiate_mesh(template21, mid_params)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """12 Specialist-High samples on the coarsest template."""
    out = tmp_path_factory.mktemp("tiny_ds")
    D.generate(D.preset("specialist-high", n_samples=12, seed=3, resolution=(2, 1)), out)
    return D.load(out), out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.acceptance_lines = []


@pytest.fixture(scope="session")
def acceptance_log(request):
    return request.config.acceptance_lines


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
