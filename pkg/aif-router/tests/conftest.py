from pathlib import Path

import numpy as np
import pytest

from app.models.schemas import EngineConfig
from app.services.generative_model import (
    ObservationModel,
    Policy,
    PreferenceModel,
    TransitionModel,
)

# 2 狀態 / 單一 2-bin 觀測的小模型，數值可以手算
TOY_A = np.array([[0.8, 0.3], [0.2, 0.7]])
TOY_B = np.array([[0.9, 0.2], [0.1, 0.8]])


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def toy_observation_model():
    return ObservationModel((TOY_A.copy(),))


@pytest.fixture
def toy_transition_model():
    return TransitionModel(TOY_B[None, :, :].copy())


@pytest.fixture
def flat_preferences():
    return PreferenceModel(latency=(0.0, 0.0, 0.0), rate=(0.0, 0.0, 0.0),
                           queue=(0.0, 0.0, 0.0), error=(0.0, 0.0))


@pytest.fixture
def two_policies():
    return (
        Policy(id=0, weights=(0.33, 0.33, 0.34), label="balanced"),
        Policy(id=1, weights=(0.0, 0.0, 1.0), label="heavy-biased"),
    )


@pytest.fixture
def engine_config():
    return EngineConfig(rng_seed=42)



@pytest.fixture(scope="session")
def scenarios_dir():
    return Path(__file__).resolve().parents[2] / "scenarios"
