import logging

import pytest


@pytest.fixture(autouse=True)
def _quiet_package_logger():
    # tests drive the logger through caplog; keep stray handlers out
    yield
    from ftct.logging_setup import reset_logging

    reset_logging()


@pytest.fixture
def caplog_ftct(caplog):
    caplog.set_level(logging.DEBUG, logger="ftct")
    return caplog
