"""Shared fixtures: one tiny dataset and one tiny trained bundle per session.

The tiny recipe is deliberately undertrained; unit tests assert mechanics
(shapes, determinism, freezing, file layout), not task performance.
"""

import numpy as np
import pytest
import torch

from civil import learn, model, pipeline


TINY_TASK = "picking"
TINY_SEED = 11

# Populated by test_acceptance.py; echoed after the run so the outcome of
# every top-level check is visible even when stdout capture is on.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance checks")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def tiny_dataset():
    return pipeline.build_dataset(
        TINY_TASK, n_demos=3, n_play=2, seed=TINY_SEED, play_observations=2
    )


@pytest.fixture(scope="session")
def tiny_data(tiny_dataset):
    return learn.TrainingData(tiny_dataset, validation_fraction=0.34)


def tiny_train_config(method: str, **overrides) -> learn.TrainConfig:
    base = dict(
        method=method,
        seed=TINY_SEED,
        epochs=3,
        causal_epochs=2,
        batch_size=64,
        learning_rate=1e-3,
    )
    base.update(overrides)
    return learn.TrainConfig(**base)


@pytest.fixture(scope="session")
def tiny_civil(tiny_data):
    """A civil bundle taken through both phases on the tiny dataset."""
    config = tiny_train_config("civil")
    bundle, r1 = learn.train_phase1(tiny_data, config)
    bundle, r2 = learn.train_phase2(tiny_data, bundle, config)
    return bundle, [r1, r2]


@pytest.fixture()
def data_root(tmp_path, monkeypatch):
    monkeypatch.setenv("CIVIL_DATA_ROOT", str(tmp_path / "root"))
    return tmp_path / "root"


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield


def rng(seed: int = 0) -> np.random.Generator:
    return np.random.default_rng(seed)
