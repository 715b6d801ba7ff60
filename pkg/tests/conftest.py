import numpy as np
import pytest
from loguru import logger

from synthetic import known_model, phone_inventory, random_lexicon


@pytest.fixture
def log_messages():
    """Messages emitted through loguru while the test runs."""
    messages = []
    handler = logger.add(lambda m: messages.append(m.record["message"]), level="DEBUG")
    yield messages
    logger.remove(handler)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def phones():
    return phone_inventory()


@pytest.fixture
def model(phones):
    return known_model(phones, dim=4, seed=7)


@pytest.fixture
def lexicon(phones):
    return random_lexicon(phones, 12, np.random.default_rng(5))
