import numpy as np
import pytest

from app.core.exceptions import UsageError
from app.models import TrainingConfig
from app.services.data_pipeline import stack_cohort
from app.services.neural_core import check_gradient, init_params
from app.services.state_encoder import (
    EncoderModel,
    _recurrent_batch,
    _sparse_batch,
    encode_all_prefixes,
    encode_cohort,
    encode_history,
    encode_observations,
    load_encoder,
    reconstruction_mse,
    recurrent_specs,
    save_encoder,
    sparse_specs,
    train_recurrent_autoencoder,
    train_sparse_autoencoder,
)
from app.utils.features import N_FEATURES

QUICK = TrainingConfig(epochs=5, batch_size=8, learning_rate=1e-2, seed=1)


def fresh_model(kind, hidden_dim=3, seed=0):
    specs = recurrent_specs(hidden_dim, seed) if kind == "recurrent" else sparse_specs(hidden_dim, seed)
    return EncoderModel(kind, init_params(specs[0]), init_params(specs[1]))


@pytest.fixture(scope="module")
def recurrent_model(processed_cohort):
    return train_recurrent_autoencoder(processed_cohort, QUICK, hidden_dim=6)


@pytest.fixture(scope="module")
def sparse_model(processed_cohort):
    observations = np.concatenate([t.observations for t in processed_cohort])
    return train_sparse_autoencoder(observations, QUICK, hidden_dim=6)


def test_recurrent_gradients_match_finite_differences(trajectory_factory):
    model = fresh_model("recurrent")
    arrays = stack_cohort([trajectory_factory("a", 3), trajectory_factory("b", 2)])
    observations, mask = arrays.observations, arrays.mask.astype(float)
    _, encoder_grad, decoder_grad = _recurrent_batch(model, observations, mask)

    def loss_with(part):
        perturbed = model.encoder.copy() if part == "encoder" else model.decoder.copy()

        def objective(theta):
            perturbed.assign(theta)
            trial = EncoderModel("recurrent", perturbed, model.decoder) if part == "encoder" else \
                EncoderModel("recurrent", model.encoder, perturbed)
            return _recurrent_batch(trial, observations, mask)[0]
        return objective

    assert check_gradient(loss_with("encoder"), model.encoder.vector, encoder_grad) < 1e-4
    assert check_gradient(loss_with("decoder"), model.decoder.vector, decoder_grad) < 1e-4


def test_sparse_gradients_include_the_sparsity_penalty(rng):
    model = fresh_model("sparse", hidden_dim=4)
    observations = rng.random((10, N_FEATURES))
    _, _, encoder_grad, _ = _sparse_batch(model, observations, 0.05, 0.5)
    perturbed = model.encoder.copy()

    def objective(theta):
        perturbed.assign(theta)
        return _sparse_batch(EncoderModel("sparse", perturbed, model.decoder), observations, 0.05, 0.5)[1]

    assert check_gradient(objective, model.encoder.vector, encoder_grad) < 1e-4


def test_sparse_loss_log_is_reconstruction_error(rng):
    observations = rng.random((12, N_FEATURES))
    config = TrainingConfig(epochs=1, batch_size=12, learning_rate=1e-2, seed=3)
    model = train_sparse_autoencoder(observations, config, hidden_dim=4, target_activation=0.05, penalty_weight=0.5)
    # one full batch: the first entry is measured on the initial weights
    mse, penalized, _, _ = _sparse_batch(fresh_model("sparse", hidden_dim=4, seed=3), observations, 0.05, 0.5)
    assert model.loss_log == [pytest.approx(mse, rel=1e-12)]
    assert penalized > mse


def test_training_reduces_reconstruction_error(recurrent_model, sparse_model, processed_cohort):
    assert recurrent_model.loss_log[-1] < recurrent_model.loss_log[0]
    assert sparse_model.loss_log[-1] < sparse_model.loss_log[0]
    untrained = fresh_model("recurrent", hidden_dim=6, seed=1)
    assert reconstruction_mse(recurrent_model, processed_cohort) < reconstruction_mse(untrained, processed_cohort)


def test_prefix_encodings_match_history_encodings(recurrent_model, processed_cohort):
    trajectory = max(processed_cohort, key=lambda t: t.length)
    prefixes = encode_all_prefixes(recurrent_model, trajectory)
    assert prefixes.shape == (trajectory.length, 6)
    for t in range(trajectory.length):
        np.testing.assert_allclose(prefixes[t], encode_history(recurrent_model, trajectory.observations[:t + 1]), atol=1e-12)


def test_batched_encoding_ignores_padding(recurrent_model, processed_cohort):
    encoded = encode_cohort(recurrent_model, processed_cohort, batch_size=7)
    assert len(encoded) == len(processed_cohort)
    for trajectory, states in zip(processed_cohort, encoded):
        np.testing.assert_allclose(states, encode_all_prefixes(recurrent_model, trajectory), atol=1e-12)


def test_sparse_state_depends_on_the_current_window_only(sparse_model, processed_cohort):
    trajectory = max(processed_cohort, key=lambda t: t.length)
    state = encode_history(sparse_model, trajectory)
    np.testing.assert_allclose(state, encode_observations(sparse_model, trajectory.observations[-1:])[0])
    assert np.all((state > 0) & (state < 1))


def test_empty_inputs_are_rejected(recurrent_model, sparse_model):
    with pytest.raises(UsageError):
        train_recurrent_autoencoder([], QUICK)
    with pytest.raises(UsageError):
        encode_history(recurrent_model, np.zeros((0, N_FEATURES)))
    with pytest.raises(UsageError):
        encode_observations(recurrent_model, np.zeros((1, N_FEATURES)))


def test_encoder_checkpoint_preserves_encodings(tmp_path, recurrent_model, processed_cohort):
    path = save_encoder(tmp_path / "encoder.ckpt", recurrent_model)
    restored = load_encoder(path)
    assert restored.kind == "recurrent"
    assert restored.loss_log == recurrent_model.loss_log
    np.testing.assert_array_equal(
        encode_all_prefixes(restored, processed_cohort[0]),
        encode_all_prefixes(recurrent_model, processed_cohort[0]),
    )
