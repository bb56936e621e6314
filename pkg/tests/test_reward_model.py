import numpy as np
import pytest

from app.core.exceptions import DataError, UsageError
from app.models import TrainingConfig
from app.services.neural_core import check_gradient, init_params
from app.services.reward_model import (
    LOGIT_BOUND,
    MortalityPredictor,
    compute_reward,
    load_predictor,
    log_odds_histogram,
    mortality_input_gradients,
    mortality_logits,
    predict_mortality,
    predictor_loss,
    predictor_spec,
    reward_summary,
    save_predictor,
    train_mortality_predictor,
    trajectory_rewards,
)
from app.utils.features import N_FEATURES


@pytest.fixture
def predictor():
    return MortalityPredictor(init_params(predictor_spec((8, 4), seed=2)))


def test_reward_is_antisymmetric(predictor, rng):
    o, o_next = rng.random(N_FEATURES), rng.random(N_FEATURES)
    assert compute_reward(predictor, o, o_next) == pytest.approx(-compute_reward(predictor, o_next, o), abs=1e-12)
    assert compute_reward(predictor, o, o) == 0.0


def test_rewards_telescope(predictor, trajectory_factory):
    trajectory = trajectory_factory("p1", 6)
    rewards = trajectory_rewards(predictor, trajectory)
    logits = mortality_logits(predictor, trajectory.observations)
    assert rewards[-1] == 0.0
    assert rewards.sum() == pytest.approx(logits[0] - logits[-1], abs=1e-12)
    assert rewards[1] == pytest.approx(compute_reward(predictor, trajectory.observations[1], trajectory.observations[2]))


def test_single_step_trajectory_earns_nothing(predictor, trajectory_factory):
    np.testing.assert_array_equal(trajectory_rewards(predictor, trajectory_factory("p1", 1)), [0.0])


def test_logits_are_bounded(predictor, rng):
    predictor.params.layers[-1][1][:] = 1e6
    logits = mortality_logits(predictor, rng.random((3, N_FEATURES)))
    assert np.all(logits == LOGIT_BOUND)
    assert predict_mortality(predictor, rng.random(N_FEATURES)) < 1.0


def test_loss_gradient_includes_input_penalty(rng):
    params = init_params(predictor_spec((5,), seed=1))
    perturbed = params.copy()
    x = rng.random((6, N_FEATURES))
    labels = np.array([0, 1, 0, 1, 1, 0], dtype=float)
    _, analytic = predictor_loss(params, x, labels, 0.05)

    def objective(theta):
        perturbed.assign(theta)
        return predictor_loss(perturbed, x, labels, 0.05)[0]

    assert check_gradient(objective, params.vector, analytic) < 1e-4


def test_predictor_learns_a_separable_rule(rng):
    x = rng.random((400, N_FEATURES))
    labels = (x[:, 0] > 0.5).astype(float)
    config = TrainingConfig(epochs=40, batch_size=32, learning_rate=1e-2, seed=0)
    predictor = train_mortality_predictor(x[:300], labels[:300], config, input_grad_weight=1e-4,
                                          hidden_dims=(8,), holdout=(x[300:], labels[300:]))
    assert predictor.accuracy > 0.8
    assert predictor.loss_log[-1] < predictor.loss_log[0]


def test_predictor_needs_both_classes(rng):
    with pytest.raises(DataError):
        train_mortality_predictor(rng.random((10, N_FEATURES)), np.zeros(10))
    with pytest.raises(UsageError):
        train_mortality_predictor(rng.random((10, N_FEATURES)), np.zeros(9))


def test_reward_summary():
    summary = reward_summary([np.array([0.5, -1.0]), np.array([4.0, 0.0])], bound=3.0)
    assert summary["count"] == 4
    assert summary["minimum"] == -1.0 and summary["maximum"] == 4.0
    assert summary["fraction_within_bound"] == 0.75


def test_log_odds_histogram_shares_edges(predictor, rng):
    x = rng.random((30, N_FEATURES))
    outcomes = np.array([0, 1] * 15)
    histogram = log_odds_histogram(predictor, x, outcomes, bins=6)
    assert len(histogram) == 6
    assert histogram["survivor"].sum() == 15 and histogram["non_survivor"].sum() == 15
    np.testing.assert_allclose(histogram["bin_right"].to_numpy()[:-1], histogram["bin_left"].to_numpy()[1:])


def test_input_gradient_table(predictor, rng):
    report = mortality_input_gradients(predictor, rng.random((5, N_FEATURES)))
    assert len(report.frame) == 5 * N_FEATURES
    assert list(report.frame.columns) == ["sample", "feature", "value", "gradient"]
    assert len(report.correlations) == N_FEATURES
    assert np.all((report.correlations >= 0) & (report.correlations <= 1 + 1e-12))


def test_predictor_checkpoint(tmp_path, predictor, rng):
    predictor.accuracy = 0.75
    restored = load_predictor(save_predictor(tmp_path / "predictor.ckpt", predictor))
    x = rng.random((4, N_FEATURES))
    np.testing.assert_array_equal(mortality_logits(restored, x), mortality_logits(predictor, x))
    assert restored.accuracy == 0.75
