"""Shared fixtures. Trained toy models are session-scoped: each takes seconds to fit."""
import numpy as np
import pytest

from nlglab.datasets import make_line, make_ring, ring_oracle
from nlglab.evaluation import Classifier
from nlglab.models.training import TrainConfig, train_diffusion, train_flow
from nlglab.schedules import rectified_flow, vp_cosine

RING_TRAIN = dict(n=20000, seed=0)
TRAIN = TrainConfig(train_steps=3000)


@pytest.fixture(scope="session")
def ring_data():
    return make_ring(**RING_TRAIN)


@pytest.fixture(scope="session")
def line_data():
    return make_line(4000, seed=0)


@pytest.fixture(scope="session")
def vp_ring_model(ring_data):
    return train_diffusion(ring_data, vp_cosine(), config=TRAIN)


@pytest.fixture(scope="session")
def rf_ring_model(ring_data):
    return train_flow(ring_data, config=TRAIN, schedule=rectified_flow())


@pytest.fixture(scope="session")
def ring_classifier(ring_data):
    return Classifier(random_state=0).fit(*ring_data)


@pytest.fixture(scope="session")
def ring_reference():
    return make_ring(2048, seed=1_000_003)[0]


@pytest.fixture(scope="session")
def vp_ring_oracle():
    return ring_oracle(vp_cosine())


@pytest.fixture
def rng_seed():
    return np.random.SeedSequence(0)


def pytest_terminal_summary(terminalreporter):
    import sys
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
