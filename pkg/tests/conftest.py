import dataclasses

import numpy as np
import pytest

from safeplan.config import TrainConfig
from safeplan.discriminator import DiscriminatorConfig
from safeplan.env import CircleConfig
from safeplan.policy import PolicyConfig
from safeplan.world_model import WorldModelConfig


def tiny_config(**top) -> TrainConfig:
    """A run small enough to train for a few hundred steps inside a unit test."""
    cfg = TrainConfig(
        seed=0, total_steps=400, prefill=120, train_every=5, batch=4, seq_len=10, imag_starts=8,
        plan_horizon=3, log_every=5, output_dir="unused",
        env=CircleConfig(episode_length=60),
        wm=WorldModelConfig(deter=8, stoch=4, hidden=16, embed=8),
        policy=PolicyConfig(horizon=3, hidden=16, target_every=10),
        disc=DiscriminatorConfig(hidden=16),
    )
    return dataclasses.replace(cfg, **top)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


ACCEPTANCE_LINES: list = []


def report(criterion: int, passed: bool, detail: str) -> bool:
    """Record one acceptance verdict; printed together at the end of the session."""
    ACCEPTANCE_LINES.append(f"{'PASS' if passed else 'FAIL'} criterion {criterion}: {detail}")
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
