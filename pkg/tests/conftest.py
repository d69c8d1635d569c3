import numpy as np
import pytest

from epirkw.tableau import load_tableau


@pytest.fixture(params=["epirkw3", "epirkw3_phi"])
def tableau(request):
    return load_tableau(request.param)


@pytest.fixture
def tab3():
    return load_tableau("epirkw3")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for num in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[num])
