import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from radmesh.field import AppearanceField, GeometryField
from radmesh.scene import SyntheticScene, generate_synthetic_dataset

settings.register_profile("radmesh", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("radmesh")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_fields():
    geo = GeometryField(levels=4, base_res=4, max_res=12, seed=3)
    app = AppearanceField(levels=4, base_res=4, max_res=12, hidden1=16, hidden2=8, seed=5)
    # random but moderate values so gradients are non-trivial
    r = np.random.default_rng(7)
    geo.grid.values[:] = r.normal(0.0, 0.5, geo.grid.values.shape)
    app.grid.values[:] = r.normal(0.0, 0.5, app.grid.values.shape)
    return geo, app


@pytest.fixture(scope="session")
def sphere_dataset():
    return generate_synthetic_dataset(SyntheticScene(), 8, 32, seed=0, n_test=2)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import REPORT
    except ImportError:
        return
    if REPORT:
        terminalreporter.section("acceptance criteria")
        for line in sorted(REPORT):
            terminalreporter.write_line(line)
