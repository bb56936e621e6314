"""
Sigmoid gate over the kernel and (restricted) DQN experts, trained by gradient
ascent on the WDR estimate of the mixture policy.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from app.core.exceptions import DegenerateWeightsError, NumericalError, UsageError
from app.core.logging_config import get_logger
from app.models.schemas import FeatureStats, GateArtifact, GatingParams, LayerSpec, NetworkSpec, TrainingConfig
from app.services.data_pipeline import ProcessedTrajectory
from app.services.neural_core import ModelParams, adam_step
from app.services.ope_wdr import EvaluationDataset, importance_ratios, wdr_estimate
from app.services.policy_experts import NeighborIndex, PolicyDistribution
from app.utils.artifacts import read_json, write_json
from app.utils.features import GATING_CLINICAL_FEATURES, GATING_FEATURE_NAMES, feature_index

logger = get_logger(__name__)

N_GATING_FEATURES = len(GATING_FEATURE_NAMES)
GATE_SPEC = NetworkSpec(layers=[LayerSpec(kind="dense", input_dim=N_GATING_FEATURES, output_dim=1, activation="sigmoid")])
CLINICAL_COLUMNS = [feature_index(name) for name in GATING_CLINICAL_FEATURES]


def gating_feature_table(observations: np.ndarray, kth_distances: np.ndarray) -> np.ndarray:
    """Unstandardized gating features for every prefix of one trajectory: [T, 9]"""
    observations = np.atleast_2d(observations)
    steps = observations.shape[0]
    return np.column_stack([
        observations[:, CLINICAL_COLUMNS],
        np.arange(1, steps + 1, dtype=float),
        np.asarray(kth_distances, dtype=float).reshape(steps),
    ])


def extract_gating_features(
    prefix: ProcessedTrajectory,
    state: np.ndarray,
    index: NeighborIndex,
    k: int = 300
) -> np.ndarray:
    """
    Features of the prefix's last step: seven clinical values from its preprocessed
    observation, the number of steps so far and the distance to the k-th nearest
    neighbor of its encoded state
    """
    if prefix.length < 1:
        raise UsageError("gating features need a non-empty prefix")
    distances, _ = index.query(state, k)
    return gating_feature_table(prefix.observations, np.full(prefix.length, distances[0, -1]))[-1]


def fit_feature_stats(rows: np.ndarray) -> FeatureStats:
    rows = np.atleast_2d(rows)
    std = rows.std(axis=0)
    return FeatureStats(mean=rows.mean(axis=0).tolist(), std=np.where(std > 0, std, 1.0).tolist())


def standardize_features(rows: np.ndarray, stats: FeatureStats) -> np.ndarray:
    return (np.asarray(rows, dtype=float) - np.array(stats.mean)) / np.array(stats.std)


def gate_probability(params: GatingParams, x: np.ndarray) -> Tuple:
    """(p_k, p_d) with p_k = sigmoid(w . x + b); vectorized over leading axes"""
    p_k = expit(np.asarray(x, dtype=float) @ np.array(params.w) + params.b)
    if np.ndim(p_k) == 0:
        p_k = float(p_k)
    return p_k, 1.0 - p_k


def mixture_policy(p_k: float, kernel: PolicyDistribution, dqn_restricted: PolicyDistribution) -> PolicyDistribution:
    return PolicyDistribution(p_k * kernel.probs + (1.0 - p_k) * dqn_restricted.probs)


def mixture_table(p_k: np.ndarray, kernel: np.ndarray, dqn_restricted: np.ndarray) -> np.ndarray:
    p_k = np.asarray(p_k)[..., None]
    return p_k * kernel + (1.0 - p_k) * dqn_restricted


@dataclass
class GateDataset:
    """Padded per-step inputs of the gate objective for the logged actions"""
    features: np.ndarray  # [I, T, 9] standardized
    kernel_probs: np.ndarray  # [I, T] pi_k(a_t | s_t)
    dqn_probs: np.ndarray  # [I, T] restricted pi_d(a_t | s_t)
    evaluation: EvaluationDataset  # behavior probs, rewards, control variates

    @classmethod
    def from_steps(
        cls,
        features: Sequence[np.ndarray],
        kernel_probs: Sequence[np.ndarray],
        dqn_probs: Sequence[np.ndarray],
        behavior_probs: Sequence[np.ndarray],
        rewards: Sequence[np.ndarray],
        q_hat: Sequence[np.ndarray],
        v_hat: Sequence[np.ndarray],
        discount: float
    ) -> "GateDataset":
        evaluation = EvaluationDataset.from_steps(kernel_probs, behavior_probs, rewards, discount, q_hat, v_hat)
        n, width = evaluation.mask.shape
        padded = np.zeros((n, width, N_GATING_FEATURES))
        dqn = np.zeros((n, width))
        for i, (rows, probs) in enumerate(zip(features, dqn_probs)):
            padded[i, :len(rows)] = rows
            dqn[i, :len(probs)] = probs
        return cls(features=padded, kernel_probs=evaluation.eval_probs.copy(), dqn_probs=dqn, evaluation=evaluation)

    @property
    def n_patients(self) -> int:
        return self.features.shape[0]

    def subset(self, indices: np.ndarray) -> "GateDataset":
        return GateDataset(
            features=self.features[indices],
            kernel_probs=self.kernel_probs[indices],
            dqn_probs=self.dqn_probs[indices],
            evaluation=self.evaluation.subset(indices),
        )

    def mixture_probs(self, params: GatingParams) -> np.ndarray:
        p_k, _ = gate_probability(params, self.features)
        return p_k * self.kernel_probs + (1.0 - p_k) * self.dqn_probs

    def evaluation_for(self, params: GatingParams) -> EvaluationDataset:
        return self.evaluation.with_eval_probs(self.mixture_probs(params))


def wdr_objective(dataset: GateDataset, params: GatingParams) -> float:
    return wdr_estimate(dataset.evaluation_for(params))


def wdr_objective_and_gradient(dataset: GateDataset, params: GatingParams) -> Tuple[float, np.ndarray]:
    """
    WDR of the mixture policy and its gradient with respect to (w, b), carried
    forward through the cumulative importance ratios and their normalization
    """
    evaluation = dataset.evaluation_for(params)
    value = wdr_estimate(evaluation)

    mask = evaluation.mask
    n, steps = mask.shape
    z = dataset.features @ np.array(params.w) + params.b
    slope = expit(z) * (1.0 - expit(z))
    behavior = np.where(mask, evaluation.behavior_probs, 1.0)
    ratios = np.where(mask, evaluation.eval_probs / behavior, 1.0)
    d_mixture = ((dataset.kernel_probs - dataset.dqn_probs) * slope / behavior * mask)[..., None]
    d_ratios = d_mixture * np.concatenate([dataset.features, np.ones((n, steps, 1))], axis=2)  # [I, T, 10]

    rho = importance_ratios(evaluation)
    discounts = evaluation.discount ** np.arange(steps)
    gradient = np.zeros(N_GATING_FEATURES + 1)
    rho_prev = np.ones(n)
    d_rho = np.zeros((n, N_GATING_FEATURES + 1))
    d_weights_prev = np.zeros((n, N_GATING_FEATURES + 1))
    for t in range(steps):
        d_rho = d_rho * ratios[:, t, None] + rho_prev[:, None] * d_ratios[:, t]
        total = rho[:, t].sum()
        weights = rho[:, t] / total
        d_weights = (d_rho - weights[:, None] * d_rho.sum(axis=0)) / total
        gradient += discounts[t] * (
            d_weights.T @ (evaluation.rewards[:, t] - evaluation.q_hat[:, t])
            + d_weights_prev.T @ evaluation.v_hat[:, t]
        )
        d_weights_prev = d_weights
        rho_prev = rho[:, t]

    return value, gradient


@dataclass
class GateFit:
    params: GatingParams
    objective: float
    best_restart_index: int
    restart_objectives: List[Optional[float]] = field(default_factory=list)


@dataclass
class GateOptions:
    restarts: int = 1000
    epochs: int = 50
    minibatch: int = 256
    learning_rate: float = 1e-4
    init_w_range: float = 1.0
    init_b_range: float = 2.0
    corner_bias: float = 20.0


def initial_params(restart: int, seed: int, options: GateOptions) -> GatingParams:
    """Restarts 0 and 1 are the pure-kernel and pure-DQN corners"""
    if restart == 0:
        return GatingParams(w=[0.0] * N_GATING_FEATURES, b=options.corner_bias)
    if restart == 1:
        return GatingParams(w=[0.0] * N_GATING_FEATURES, b=-options.corner_bias)
    rng = np.random.default_rng([seed, restart])
    w = rng.uniform(-options.init_w_range, options.init_w_range, size=N_GATING_FEATURES)
    b = rng.uniform(-options.init_b_range, options.init_b_range)
    return GatingParams(w=w.tolist(), b=float(b))


def _to_params(model: ModelParams) -> GatingParams:
    weights, bias = model.layers[0]
    return GatingParams(w=weights[:, 0].tolist(), b=float(bias[0]))


def _full_objective(dataset: GateDataset, params: GatingParams) -> Optional[float]:
    try:
        value = wdr_objective(dataset, params)
    except DegenerateWeightsError:
        return None
    return value if np.isfinite(value) else None


def _run_restart(dataset: GateDataset, restart: int, seed: int, options: GateOptions) -> Tuple[Optional[float], GatingParams]:
    start = initial_params(restart, seed, options)
    model = ModelParams(GATE_SPEC, np.array(start.w + [start.b]))
    config = TrainingConfig(batch_size=options.minibatch, epochs=options.epochs, learning_rate=options.learning_rate)
    rng = np.random.default_rng([seed, restart, 1])

    best_value, best_params = _full_objective(dataset, start), start
    for _ in range(options.epochs):
        order = rng.permutation(dataset.n_patients)
        for begin in range(0, dataset.n_patients, options.minibatch):
            batch = dataset.subset(order[begin:begin + options.minibatch])
            try:
                _, gradient = wdr_objective_and_gradient(batch, _to_params(model))
            except DegenerateWeightsError:
                continue
            if not np.all(np.isfinite(gradient)):
                continue
            adam_step(model, gradient, config, ascent=True)
        current = _to_params(model)
        value = _full_objective(dataset, current)
        if value is not None and (best_value is None or value > best_value):
            best_value, best_params = value, current
    return best_value, best_params


def optimize_gate(
    dataset: GateDataset,
    options: Optional[GateOptions] = None,
    seed: int = 0,
    workers: int = 1
) -> GateFit:
    """
    Best of `restarts` Adam ascents on minibatch WDR. Each restart keeps its best
    iterate by full-dataset WDR (initial point included); ties go to the lower index.
    """
    options = options or GateOptions()
    if options.restarts < 1:
        raise UsageError("optimize_gate needs at least one restart")

    def run(restart: int):
        return _run_restart(dataset, restart, seed, options)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        results = list(executor.map(run, range(options.restarts)))

    best_index, best_value, best_params = None, None, None
    objectives = []
    for restart, (value, params) in enumerate(results):
        objectives.append(value)
        if value is None:
            logger.warning(f"Gate restart {restart} discarded: non-finite objective")
            continue
        logger.debug(f"Gate restart {restart}: objective {value:.6f}")
        if best_value is None or value > best_value:
            best_index, best_value, best_params = restart, value, params
    if best_params is None:
        raise NumericalError("every gate restart produced a non-finite objective")

    logger.info(f"Gate: best restart {best_index} of {options.restarts}, training WDR {best_value:.5f}")
    return GateFit(params=best_params, objective=best_value, best_restart_index=best_index,
                   restart_objectives=objectives)


def gate_artifact(fit: GateFit, stats: FeatureStats, seed: int) -> GateArtifact:
    return GateArtifact(w=fit.params.w, b=fit.params.b, feature_stats=stats, seed=seed,
                        best_restart_index=fit.best_restart_index, objective=fit.objective)


def save_gate(path: Path, artifact: GateArtifact) -> Path:
    return write_json(path, artifact.model_dump())


def load_gate(path: Path) -> GateArtifact:
    return GateArtifact.model_validate(read_json(path))
