import os

import pytest

from roost.transport import find_free_base_port


@pytest.fixture
def free_port():
    return find_free_base_port


@pytest.fixture(scope="session")
def oracle_dir():
    return os.path.join(os.path.dirname(__file__), "oracles")
