from __future__ import annotations

import numpy as np
import pytest

from idealrec.data import DriftConfig, drift_steps, steps_to_interactions, synth_drift_stream
from idealrec.generator import TrainConfig, train_joint
from idealrec.models import BackboneConfig

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_drift():
    """50 users, 80 items, 4 domains; steps 1..29 with 4 negatives per positive."""
    cfg = DriftConfig(users=50, items=80, domains=4, switch_prob=0.1, length=30, seed=3)
    data = synth_drift_stream(cfg)
    steps = drift_steps(data, 1, cfg.length, 4, 30, seed=3)
    return data, steps


@pytest.fixture(scope="session")
def small_bundle(small_drift):
    _, steps = small_drift
    cfg = BackboneConfig(vocab_size=80, dim=8)
    return train_joint(steps_to_interactions(steps[:40]), cfg, TrainConfig(epochs=20, lr=0.01, optimizer="adam", seed=0))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
