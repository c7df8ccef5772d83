import pytest

from leverage_cycle_sim.model.params import ModelParams, State


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow model-reproduction tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="need --runslow option to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def params():
    return ModelParams()


@pytest.fixture
def small_bank():
    return ModelParams(e_bar=1e-5)


@pytest.fixture
def balance_sheet_state():
    """A_B = 10, L_B = 8, E_B = 2 at the fundamental price."""
    return State(sigma_sq=4e-4, w_f=0.5, p=25.0, n=0.12, l_b=8.0, p_lag=25.0)
