"""
Mortality predictor f(o) and the log-odds reward r = logit f(o) - logit f(o'),
with the log-odds histogram and input-gradient diagnostics.
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.special import expit, logit

from app.core.exceptions import DataError, TrainingError, UsageError
from app.core.logging_config import get_logger
from app.models.schemas import NetworkSpec, TrainingConfig, dense_stack
from app.services.data_pipeline import ProcessedTrajectory
from app.services.neural_core import (
    ModelParams,
    adam_step,
    backward,
    bce_with_logits,
    forward,
    init_params,
    input_gradient,
    input_gradient_penalty,
    load_models,
    save_models,
)
from app.utils.features import FEATURE_NAMES, N_FEATURES

logger = get_logger(__name__)

PROBABILITY_CLAMP = 1e-12
LOGIT_BOUND = float(logit(1.0 - PROBABILITY_CLAMP))
INPUT_GRAD_WEIGHT = 1e-3
REWARD_RANGE = 3.0


@dataclass
class MortalityPredictor:
    """Dense network with a single logit output; f(o) = sigmoid(logit)"""
    params: ModelParams
    input_grad_weight: float = INPUT_GRAD_WEIGHT
    accuracy: Optional[float] = None
    loss_log: List[float] = field(default_factory=list)


@dataclass
class InputGradientReport:
    frame: pd.DataFrame  # sample, feature, value, gradient
    correlations: pd.Series  # feature -> |corr(value, gradient)|


def predictor_spec(hidden_dims: Sequence[int] = (64, 32), seed: int = 0) -> NetworkSpec:
    return dense_stack([N_FEATURES, *hidden_dims, 1], hidden_activation="tanh", output_activation="linear", seed=seed)


def predictor_loss(params: ModelParams, observations: np.ndarray, labels: np.ndarray, weight: float) -> Tuple[float, np.ndarray]:
    """Cross-entropy plus weight * L1 norm of d logit / d input, and the parameter gradient"""
    logits, cache = forward(params, observations)
    loss, grad_logits = bce_with_logits(logits, labels.reshape(-1, 1))
    grads = backward(params, cache, grad_logits)
    if weight > 0:
        penalty, penalty_grads = input_gradient_penalty(params, observations, weight)
        loss += penalty
        grads = grads + penalty_grads
    return loss, grads


def train_mortality_predictor(
    observations: np.ndarray,
    labels: np.ndarray,
    config: Optional[TrainingConfig] = None,
    input_grad_weight: Optional[float] = None,
    hidden_dims: Sequence[int] = (64, 32),
    holdout: Optional[Tuple[np.ndarray, np.ndarray]] = None
) -> MortalityPredictor:
    """
    Class-balanced mini-batches: half of each batch is drawn with replacement from
    survivors and half from non-survivors. Accuracy is reported on the holdout set
    when one is given.
    """
    observations = np.atleast_2d(np.asarray(observations, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.float64).ravel()
    if observations.shape[0] != labels.size:
        raise UsageError("observations and labels differ in length")
    positives = np.flatnonzero(labels == 1)
    negatives = np.flatnonzero(labels == 0)
    if positives.size == 0 or negatives.size == 0:
        raise DataError("the mortality predictor needs both survivors and non-survivors")

    config = config or TrainingConfig()
    weight = config.penalty("input_gradient", INPUT_GRAD_WEIGHT) if input_grad_weight is None else input_grad_weight
    predictor = MortalityPredictor(init_params(predictor_spec(hidden_dims, config.seed)), input_grad_weight=weight)
    rng = np.random.default_rng(config.seed)
    n_batches = max(1, int(np.ceil(labels.size / config.batch_size)))
    n_negative = config.batch_size // 2

    for epoch in range(1, config.epochs + 1):
        total = 0.0
        for _ in range(n_batches):
            batch = np.concatenate([
                rng.choice(positives, size=config.batch_size - n_negative, replace=True),
                rng.choice(negatives, size=n_negative, replace=True),
            ])
            loss, grads = predictor_loss(predictor.params, observations[batch], labels[batch], weight)
            if not np.isfinite(loss):
                raise TrainingError("mortality predictor loss diverged", epoch=epoch)
            adam_step(predictor.params, grads, config)
            total += loss
        predictor.loss_log.append(total / n_batches)
        logger.info(f"Mortality predictor epoch {epoch}/{config.epochs}: loss {predictor.loss_log[-1]:.5f}")

    eval_x, eval_y = holdout if holdout is not None else (observations, labels)
    predictor.accuracy = prediction_accuracy(predictor, eval_x, eval_y)
    logger.info(f"Mortality predictor accuracy: {predictor.accuracy:.4f}")
    return predictor


def mortality_logits(predictor: MortalityPredictor, observations: np.ndarray) -> np.ndarray:
    """logit f(o), bounded so the implied probability stays in [1e-12, 1 - 1e-12]"""
    observations = np.atleast_2d(np.asarray(observations, dtype=np.float64))
    logits, _ = forward(predictor.params, observations)
    return np.clip(logits[:, 0], -LOGIT_BOUND, LOGIT_BOUND)


def predict_mortality(predictor: MortalityPredictor, observations: np.ndarray):
    """f(o) for one observation (float) or a batch (array)"""
    observations = np.asarray(observations, dtype=np.float64)
    probabilities = expit(mortality_logits(predictor, observations))
    return float(probabilities[0]) if observations.ndim == 1 else probabilities


def prediction_accuracy(predictor: MortalityPredictor, observations: np.ndarray, labels: np.ndarray) -> float:
    predicted = (predict_mortality(predictor, np.atleast_2d(observations)) >= 0.5).astype(float)
    return float(np.mean(predicted == np.asarray(labels, dtype=float).ravel()))


def compute_reward(predictor: MortalityPredictor, observation: np.ndarray, next_observation: np.ndarray) -> float:
    """Change in negative mortality log-odds; positive when predicted odds fall"""
    logits = mortality_logits(predictor, np.stack([observation, next_observation]))
    return float(logits[0] - logits[1])


def trajectory_rewards(predictor: MortalityPredictor, trajectory: ProcessedTrajectory) -> np.ndarray:
    """r_t for every step; the final step has no successor and earns 0"""
    logits = mortality_logits(predictor, trajectory.observations)
    rewards = np.zeros(trajectory.length)
    rewards[:-1] = logits[:-1] - logits[1:]
    return rewards


def reward_summary(rewards: Sequence[np.ndarray], bound: float = REWARD_RANGE) -> Dict[str, float]:
    values = np.concatenate([np.asarray(r, dtype=float) for r in rewards])
    summary = {
        "count": float(values.size),
        "mean": float(values.mean()),
        "minimum": float(values.min()),
        "maximum": float(values.max()),
        "fraction_within_bound": float(np.mean(np.abs(values) <= bound)),
    }
    logger.info(f"Rewards in [{summary['minimum']:.3f}, {summary['maximum']:.3f}]; "
                f"{100 * summary['fraction_within_bound']:.2f}% within +/-{bound:g}")
    if summary["fraction_within_bound"] < 0.99:
        logger.warning(f"Fewer than 99% of rewards lie within +/-{bound:g}")
    return summary


def log_odds_histogram(
    predictor: MortalityPredictor,
    observations: np.ndarray,
    outcomes: np.ndarray,
    bins: int = 40
) -> pd.DataFrame:
    """Shared-edge histogram of logit f(o) per true class"""
    logits = mortality_logits(predictor, observations)
    outcomes = np.asarray(outcomes).ravel()
    low, high = float(logits.min()), float(logits.max())
    if not high > low:
        low, high = low - 0.5, high + 0.5
    edges = np.histogram_bin_edges(logits, bins=bins, range=(low, high))
    survivor_counts, _ = np.histogram(logits[outcomes == 0], bins=edges)
    non_survivor_counts, _ = np.histogram(logits[outcomes == 1], bins=edges)
    return pd.DataFrame({
        "bin_left": edges[:-1],
        "bin_right": edges[1:],
        "survivor": survivor_counts,
        "non_survivor": non_survivor_counts,
    })


def mortality_input_gradients(predictor: MortalityPredictor, observations: np.ndarray) -> InputGradientReport:
    """Per (sample, feature) value and d logit / d feature, plus per-feature |correlation|"""
    observations = np.atleast_2d(np.asarray(observations, dtype=np.float64))
    gradients = input_gradient(predictor.params, observations)
    n, width = observations.shape
    names = list(FEATURE_NAMES) if width == N_FEATURES else [f"x{j}" for j in range(width)]
    frame = pd.DataFrame({
        "sample": np.repeat(np.arange(n), width),
        "feature": np.tile(names, n),
        "value": observations.ravel(),
        "gradient": gradients.ravel(),
    })
    correlations = (
        frame.groupby("feature", sort=False)[["value", "gradient"]]
        .apply(lambda group: group["value"].corr(group["gradient"]))
        .fillna(0.0)
        .abs()
    )
    return InputGradientReport(frame=frame, correlations=correlations)


def save_predictor(path: Path, predictor: MortalityPredictor) -> Path:
    return save_models(path, {"predictor": predictor.params}, {
        "input_grad_weight": predictor.input_grad_weight,
        "accuracy": predictor.accuracy,
        "loss_log": predictor.loss_log,
    })


def load_predictor(path: Path) -> MortalityPredictor:
    models, header = load_models(path)
    return MortalityPredictor(
        params=models["predictor"],
        input_grad_weight=header["input_grad_weight"],
        accuracy=header["accuracy"],
        loss_log=list(header["loss_log"]),
    )
