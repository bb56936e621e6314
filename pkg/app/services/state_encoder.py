"""
Patient-history encoders: an LSTM sequence autoencoder (state = final encoder
hidden vector) and a single-layer sparse autoencoder over individual observations.
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Literal, Optional, Sequence, Union

import numpy as np

from app.core.exceptions import TrainingError, UsageError
from app.core.logging_config import get_logger
from app.models.schemas import LayerSpec, NetworkSpec, TrainingConfig
from app.services.data_pipeline import ProcessedTrajectory, stack_cohort
from app.services.neural_core import (
    ModelParams,
    adam_step,
    backward,
    backward_all,
    forward,
    init_params,
    load_models,
    mse_loss,
    save_models,
)
from app.utils.features import N_FEATURES

logger = get_logger(__name__)

ENCODED_DIM = 128
SPARSE_TARGET_ACTIVATION = 0.05
SPARSE_PENALTY_WEIGHT = 1e-3


@dataclass
class EncoderModel:
    kind: Literal["recurrent", "sparse"]
    encoder: ModelParams
    decoder: ModelParams
    loss_log: List[float] = field(default_factory=list)

    @property
    def hidden_dim(self) -> int:
        return self.encoder.spec.output_dim


def recurrent_specs(hidden_dim: int = ENCODED_DIM, seed: int = 0):
    encoder = NetworkSpec(layers=[LayerSpec(kind="lstm", input_dim=N_FEATURES, output_dim=hidden_dim)], init_seed=seed)
    # zero-input decoder seeded with the encoded state
    decoder = NetworkSpec(layers=[
        LayerSpec(kind="lstm", input_dim=1, output_dim=hidden_dim),
        LayerSpec(kind="dense", input_dim=hidden_dim, output_dim=N_FEATURES, activation="sigmoid"),
    ], init_seed=seed + 1)
    return encoder, decoder


def sparse_specs(hidden_dim: int = ENCODED_DIM, seed: int = 0):
    encoder = NetworkSpec(layers=[LayerSpec(kind="dense", input_dim=N_FEATURES, output_dim=hidden_dim, activation="sigmoid")],
                          init_seed=seed)
    decoder = NetworkSpec(layers=[LayerSpec(kind="dense", input_dim=hidden_dim, output_dim=N_FEATURES, activation="sigmoid")],
                          init_seed=seed + 1)
    return encoder, decoder


def _check_loss(loss: float, epoch: int) -> None:
    if not np.isfinite(loss):
        raise TrainingError("reconstruction loss diverged", epoch=epoch)


def _recurrent_batch(model: EncoderModel, observations: np.ndarray, mask: np.ndarray):
    """Loss plus encoder and decoder gradients for one padded batch"""
    n, steps, _ = observations.shape
    hidden, encoder_cache = forward(model.encoder, observations, mask)
    state = hidden[:, -1]
    reconstruction, decoder_cache = forward(
        model.decoder, np.zeros((n, steps, 1)), mask, initial_state=(state, np.zeros_like(state))
    )
    loss, grad_output = mse_loss(reconstruction, observations, mask)
    decoder_grads = backward_all(model.decoder, decoder_cache, grad_output)
    grad_hidden = np.zeros_like(hidden)
    grad_hidden[:, -1] = decoder_grads.initial_state[0]
    encoder_grad = backward(model.encoder, encoder_cache, grad_hidden)
    return loss, encoder_grad, decoder_grads.params


def train_recurrent_autoencoder(
    train: Sequence[ProcessedTrajectory],
    config: Optional[TrainingConfig] = None,
    hidden_dim: int = ENCODED_DIM
) -> EncoderModel:
    """Seq2seq LSTM autoencoder trained on masked reconstruction MSE with Adam"""
    if not train:
        raise UsageError("train_recurrent_autoencoder needs at least one trajectory")
    config = config or TrainingConfig()
    encoder_spec, decoder_spec = recurrent_specs(hidden_dim, config.seed)
    model = EncoderModel("recurrent", init_params(encoder_spec), init_params(decoder_spec))

    arrays = stack_cohort(train)
    mask = arrays.mask.astype(float)
    rng = np.random.default_rng(config.seed)
    n = len(train)

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        total, weight = 0.0, 0.0
        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size]
            steps = int(arrays.lengths[batch].max())
            loss, encoder_grad, decoder_grad = _recurrent_batch(
                model, arrays.observations[batch, :steps], mask[batch, :steps]
            )
            _check_loss(loss, epoch)
            adam_step(model.encoder, encoder_grad, config)
            adam_step(model.decoder, decoder_grad, config)
            cells = float(mask[batch, :steps].sum())
            total += loss * cells
            weight += cells

        model.loss_log.append(total / weight)
        logger.info(f"Recurrent autoencoder epoch {epoch}/{config.epochs}: reconstruction MSE {model.loss_log[-1]:.6f}")

    return model


def _sparse_batch(model: EncoderModel, observations: np.ndarray, target: float, penalty_weight: float):
    hidden, encoder_cache = forward(model.encoder, observations)
    reconstruction, decoder_cache = forward(model.decoder, hidden)
    loss, grad_output = mse_loss(reconstruction, observations)
    decoder_grads = backward_all(model.decoder, decoder_cache, grad_output)

    # KL(target || mean activation) summed over hidden units
    mean_activation = np.clip(hidden.mean(axis=0), 1e-12, 1.0 - 1e-12)
    kl = np.sum(target * np.log(target / mean_activation)
                + (1.0 - target) * np.log((1.0 - target) / (1.0 - mean_activation)))
    d_mean = -target / mean_activation + (1.0 - target) / (1.0 - mean_activation)
    grad_hidden = decoder_grads.inputs + penalty_weight * d_mean / hidden.shape[0]

    encoder_grad = backward(model.encoder, encoder_cache, grad_hidden)
    return loss, loss + penalty_weight * float(kl), encoder_grad, decoder_grads.params


def train_sparse_autoencoder(
    observations: np.ndarray,
    config: Optional[TrainingConfig] = None,
    hidden_dim: int = ENCODED_DIM,
    target_activation: Optional[float] = None,
    penalty_weight: Optional[float] = None
) -> EncoderModel:
    """Single hidden layer autoencoder with a KL sparsity penalty on mean activations"""
    observations = np.atleast_2d(np.asarray(observations, dtype=np.float64))
    if observations.shape[0] == 0:
        raise UsageError("train_sparse_autoencoder needs at least one observation")
    config = config or TrainingConfig()
    target = config.penalty("sparsity_target", SPARSE_TARGET_ACTIVATION) if target_activation is None else target_activation
    weight = config.penalty("sparsity_weight", SPARSE_PENALTY_WEIGHT) if penalty_weight is None else penalty_weight

    encoder_spec, decoder_spec = sparse_specs(hidden_dim, config.seed)
    model = EncoderModel("sparse", init_params(encoder_spec), init_params(decoder_spec))
    rng = np.random.default_rng(config.seed)
    n = observations.shape[0]

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        total_mse = total_loss = 0.0
        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size]
            mse, loss, encoder_grad, decoder_grad = _sparse_batch(model, observations[batch], target, weight)
            _check_loss(loss, epoch)
            adam_step(model.encoder, encoder_grad, config)
            adam_step(model.decoder, decoder_grad, config)
            total_mse += mse * len(batch)
            total_loss += loss * len(batch)

        # reconstruction MSE only
        model.loss_log.append(total_mse / n)
        logger.info(f"Sparse autoencoder epoch {epoch}/{config.epochs}: reconstruction MSE {model.loss_log[-1]:.6f}, "
                    f"with sparsity penalty {total_loss / n:.6f}")

    return model


def _history_array(history: Union[ProcessedTrajectory, np.ndarray]) -> np.ndarray:
    values = history.observations if isinstance(history, ProcessedTrajectory) else history
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    if values.shape[0] == 0:
        raise UsageError("cannot encode an empty history")
    return values


def encode_history(model: EncoderModel, history: Union[ProcessedTrajectory, np.ndarray]) -> np.ndarray:
    """State after consuming every step of the history in order"""
    values = _history_array(history)
    if model.kind == "sparse":
        return encode_observations(model, values[-1:])[0]
    hidden, _ = forward(model.encoder, values[None, :, :])
    return hidden[0, -1]


def encode_all_prefixes(model: EncoderModel, history: Union[ProcessedTrajectory, np.ndarray]) -> np.ndarray:
    """[T, hidden]: row t encodes steps 0..t"""
    values = _history_array(history)
    if model.kind == "sparse":
        return encode_observations(model, values)
    hidden, _ = forward(model.encoder, values[None, :, :])
    return hidden[0]


def encode_observations(model: EncoderModel, observations: np.ndarray) -> np.ndarray:
    if model.kind != "sparse":
        raise UsageError("encode_observations applies to the sparse encoder")
    hidden, _ = forward(model.encoder, np.atleast_2d(observations))
    return hidden


def encode_cohort(model: EncoderModel, trajectories: Sequence[ProcessedTrajectory], batch_size: int = 256) -> List[np.ndarray]:
    """Per-trajectory [T, hidden] prefix encodings"""
    if model.kind == "sparse":
        return [encode_observations(model, trajectory.observations) for trajectory in trajectories]

    encoded = []
    for start in range(0, len(trajectories), batch_size):
        chunk = trajectories[start:start + batch_size]
        arrays = stack_cohort(chunk)
        hidden, _ = forward(model.encoder, arrays.observations, arrays.mask.astype(float))
        encoded.extend(hidden[i, :length].copy() for i, length in enumerate(arrays.lengths))
    return encoded


def reconstruction_mse(model: EncoderModel, trajectories: Sequence[ProcessedTrajectory]) -> float:
    """Mean squared reconstruction error over every real step"""
    if model.kind == "sparse":
        observations = np.concatenate([trajectory.observations for trajectory in trajectories])
        hidden, _ = forward(model.encoder, observations)
        reconstruction, _ = forward(model.decoder, hidden)
        return mse_loss(reconstruction, observations)[0]

    arrays = stack_cohort(trajectories)
    mask = arrays.mask.astype(float)
    hidden, _ = forward(model.encoder, arrays.observations, mask)
    state = hidden[:, -1]
    reconstruction, _ = forward(
        model.decoder, np.zeros(arrays.observations.shape[:2] + (1,)), mask,
        initial_state=(state, np.zeros_like(state))
    )
    return mse_loss(reconstruction, arrays.observations, mask)[0]


def save_encoder(path: Path, model: EncoderModel) -> Path:
    return save_models(path, {"encoder": model.encoder, "decoder": model.decoder},
                       {"kind": model.kind, "loss_log": model.loss_log})


def load_encoder(path: Path) -> EncoderModel:
    models, header = load_models(path)
    return EncoderModel(header["kind"], models["encoder"], models["decoder"], list(header["loss_log"]))
