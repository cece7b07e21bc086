import pytest

from sparsekit.tensor import make_rng


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run desk-scale experiment and full-size kernel tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale experiment or full-size benchmark")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return make_rng(20240611)
