import logging

import pytest
from _pytest.logging import caplog as _caplog
from loguru import logger
import torch


@pytest.fixture
def caplog(_caplog):
    """Fix caplog to work with loguru
    """
    class PropogateHandler(logging.Handler):
        def emit(self, record):
            logging.getLogger(record.name).handle(record)

    handler_id = logger.add(PropogateHandler(), format="{message}")
    yield _caplog
    logger.remove(handler_id)


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow trend tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def seeded():
    torch.manual_seed(0)
    yield
