import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from morphoumi.mesh import icosahedron, make_mesh, sphere_mesh

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def record():
    def _record(k, ok, detail):
        ACCEPTANCE[k] = (bool(ok), detail)
        print(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
    return _record


@pytest.fixture(scope="session")
def ico():
    return icosahedron()


@pytest.fixture(scope="session")
def tri():
    return make_mesh(3, [(0, 1, 2)])


@pytest.fixture(scope="session")
def sphere200():
    return sphere_mesh(200)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
