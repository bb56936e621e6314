"""Shared fixtures: small simulator cohorts, processed trajectories and settings factories"""
import json
import os
from pathlib import Path

import numpy as np
import pytest

from app.core.config import load_settings
from app.services.cohort_sim import default_sim_mdp, generate_cohort
from app.services.data_pipeline import ProcessedTrajectory, fit_action_space, fit_preprocess, process_trajectory
from app.utils.features import N_ACTIONS, N_FEATURES


# Small enough for a full pipeline run in seconds
TINY_RUN = {
    "SIM_N_PATIENTS": 120,
    "SIM_HORIZON": 6,
    "ENCODER_HIDDEN_DIM": 8,
    "ENCODER_EPOCHS": 2,
    "ENCODER_BATCH_SIZE": 32,
    "SPARSE_EPOCHS": 2,
    "SPARSE_BATCH_SIZE": 64,
    "REWARD_HIDDEN_DIMS": [8, 4],
    "REWARD_EPOCHS": 2,
    "REWARD_BATCH_SIZE": 64,
    "REWARD_HISTOGRAM_BINS": 10,
    "DQN_STEPS": 60,
    "DQN_BATCH_SIZE": 16,
    "DQN_HIDDEN_DIM": 16,
    "DQN_HEAD_DIM": 8,
    "DQN_TARGET_SYNC": 20,
    "DQN_LOG_EVERY": 30,
    "KERNEL_K": 40,
    "KERNEL_BEHAVIOR_K": 40,
    "KERNEL_CANDIDATE_KS": [30, 40],
    "RESTRICTION_THRESHOLD": 1e-4,
    "GATE_RESTARTS": 3,
    "GATE_EPOCHS": 2,
    "GATE_MINIBATCH": 32,
    "BOOTSTRAP_SAMPLES": 5,
    "PARALLEL_WORKERS": 2,
}


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def settings_factory(tmp_path, monkeypatch):
    """Settings rooted in a temporary output directory, isolated from the caller's MOE_* variables"""
    for key in [key for key in list(os.environ) if key.startswith("MOE_")]:
        monkeypatch.delenv(key)
    monkeypatch.chdir(tmp_path)

    def build(**overrides):
        values = {"OUTPUT_DIR": tmp_path / "run", **overrides}
        return load_settings(overrides=values)

    return build


@pytest.fixture
def tiny_settings(settings_factory):
    return settings_factory(**TINY_RUN)


@pytest.fixture(scope="session")
def sim_mdp():
    return default_sim_mdp(horizon=5, discount=0.99)


@pytest.fixture(scope="session")
def raw_cohort(sim_mdp):
    return generate_cohort(sim_mdp, 40, seed=3)


@pytest.fixture(scope="session")
def processed_cohort(raw_cohort):
    stats = fit_preprocess(raw_cohort)
    space = fit_action_space(raw_cohort)
    return [process_trajectory(stats, space, trajectory) for trajectory in raw_cohort]


def random_trajectory(rng, patient_id: str, length: int, outcome: int = 0) -> ProcessedTrajectory:
    return ProcessedTrajectory(
        patient_id=patient_id,
        observations=rng.random((length, N_FEATURES)),
        actions=rng.integers(0, N_ACTIONS, size=length),
        outcome=outcome,
    )


def random_policy_table(rng, rows: int, n_actions: int = N_ACTIONS) -> np.ndarray:
    table = rng.random((rows, n_actions)) + 1e-3
    return table / table.sum(axis=1, keepdims=True)


@pytest.fixture
def trajectory_factory(rng):
    def build(patient_id: str, length: int, outcome: int = 0) -> ProcessedTrajectory:
        return random_trajectory(rng, patient_id, length, outcome)
    return build


def write_config(path: Path, payload: dict) -> Path:
    path.write_text(json.dumps(payload), encoding="utf-8")
    return path
