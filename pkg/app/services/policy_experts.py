"""
Treatment experts and the clinician (behavior) policy estimate.

- NeighborIndex: exact Euclidean k-NN over encoded training states
- kernel / behavior policies from neighbor action frequencies
- dueling double DQN with prioritized replay and a Q-magnitude penalty
- action restriction to actions clinicians take at least 1% of the time
"""
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.distance import cdist

from app.core.exceptions import TrainingError, UsageError
from app.core.logging_config import get_logger
from app.models.schemas import TrainingConfig, dense_stack
from app.services.data_pipeline import ProcessedTrajectory
from app.services.neural_core import (
    ModelParams,
    adam_step,
    backward,
    backward_all,
    forward,
    init_params,
    load_models,
    save_models,
    softmax,
)
from app.utils.features import N_ACTIONS
from app.utils.validators import is_distribution

logger = get_logger(__name__)

DEFAULT_K = 300
BEHAVIOR_SMOOTHING = 1e-3
RESTRICTION_THRESHOLD = 0.01
QUERY_CHUNK = 512


@dataclass(frozen=True, eq=False)
class PolicyDistribution:
    """Probabilities over the discrete actions"""
    probs: np.ndarray

    def __post_init__(self):
        probs = np.array(self.probs, dtype=np.float64)
        if probs.ndim != 1 or not is_distribution(probs):
            raise UsageError("policy probabilities must be a non-negative vector summing to 1")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    @classmethod
    def point_mass(cls, action: int, n_actions: int = N_ACTIONS) -> "PolicyDistribution":
        probs = np.zeros(n_actions)
        probs[action] = 1.0
        return cls(probs)

    @property
    def greedy_action(self) -> int:
        return int(np.argmax(self.probs))


class NeighborIndex:
    """
    Exact k-NN over stored states. Rows are kept sorted by (patient_id, t), so a
    stable sort on distance realizes the (distance, patient_id, t) tie rule.
    """

    def __init__(
        self,
        states: np.ndarray,
        actions: np.ndarray,
        outcomes: np.ndarray,
        patient_ids: Sequence[str],
        timesteps: np.ndarray
    ):
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        if states.shape[0] == 0:
            raise UsageError("cannot build a neighbor index without states")
        n = states.shape[0]
        patient_ids = np.asarray(patient_ids, dtype=str)
        timesteps = np.asarray(timesteps, dtype=int)
        if not (len(actions) == len(outcomes) == len(patient_ids) == len(timesteps) == n):
            raise UsageError("neighbor metadata must have one entry per state")

        order = np.lexsort((timesteps, patient_ids))
        self.states = states[order]
        self.actions = np.asarray(actions, dtype=int)[order]
        self.outcomes = np.asarray(outcomes, dtype=int)[order]
        self.patient_ids = patient_ids[order]
        self.timesteps = timesteps[order]
        # index row of each state in input order
        self.input_rows = np.argsort(order)
        for array in (self.states, self.actions, self.outcomes, self.timesteps, self.input_rows):
            array.setflags(write=False)

    @property
    def size(self) -> int:
        return self.states.shape[0]

    def query(self, queries: np.ndarray, k: int, exclude: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
        """
        (distances, row indices), each [Q, k], sorted by the tie rule.
        `exclude` holds one index row per query that may not be returned for it,
        e.g. `input_rows` when the queries are the indexed states themselves.
        """
        queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        available = self.size if exclude is None else self.size - 1
        if k < 1 or k > available:
            raise UsageError(f"k={k} must lie in [1, {available}] (index size {self.size})")
        if exclude is not None:
            exclude = np.asarray(exclude, dtype=int)
            if exclude.shape != (queries.shape[0],):
                raise UsageError("exclude needs one index row per query")
        if queries.shape[1] != self.states.shape[1]:
            raise UsageError(f"queries have width {queries.shape[1]}, index stores {self.states.shape[1]}")

        distances = np.empty((queries.shape[0], k))
        indices = np.empty((queries.shape[0], k), dtype=int)
        for start in range(0, queries.shape[0], QUERY_CHUNK):
            block = cdist(queries[start:start + QUERY_CHUNK], self.states)
            if exclude is not None:
                block[np.arange(block.shape[0]), exclude[start:start + QUERY_CHUNK]] = np.inf
            kth = np.partition(block, k - 1, axis=1)[:, k - 1]
            for offset, row in enumerate(block):
                candidates = np.flatnonzero(row <= kth[offset])
                ranked = candidates[np.argsort(row[candidates], kind="stable")[:k]]
                distances[start + offset] = row[ranked]
                indices[start + offset] = ranked
        return distances, indices


def build_neighbor_index(
    encoded: Sequence[np.ndarray],
    trajectories: Sequence[ProcessedTrajectory]
) -> NeighborIndex:
    """Index every (patient, t) state of the training trajectories"""
    if not trajectories:
        raise UsageError("cannot build a neighbor index from an empty cohort")
    return NeighborIndex(
        states=np.concatenate(encoded),
        actions=np.concatenate([trajectory.actions for trajectory in trajectories]),
        outcomes=np.concatenate([np.full(trajectory.length, trajectory.outcome) for trajectory in trajectories]),
        patient_ids=[trajectory.patient_id for trajectory in trajectories for _ in range(trajectory.length)],
        timesteps=np.concatenate([np.arange(trajectory.length) for trajectory in trajectories]),
    )


def _action_counts(actions: np.ndarray, weights: Optional[np.ndarray] = None) -> np.ndarray:
    counts = np.zeros((actions.shape[0], N_ACTIONS))
    rows = np.repeat(np.arange(actions.shape[0]), actions.shape[1])
    np.add.at(counts, (rows, actions.ravel()), 1.0 if weights is None else weights.ravel())
    return counts


def kernel_from_neighbors(index: NeighborIndex, neighbors: np.ndarray) -> np.ndarray:
    """Action frequencies over surviving neighbors; all neighbors when none survived"""
    actions = index.actions[neighbors]
    survived = (index.outcomes[neighbors] == 0).astype(float)
    survivor_counts = _action_counts(actions, survived)
    all_counts = _action_counts(actions)
    totals = survivor_counts.sum(axis=1, keepdims=True)
    counts = np.where(totals > 0, survivor_counts, all_counts)
    return counts / counts.sum(axis=1, keepdims=True)


def behavior_from_neighbors(index: NeighborIndex, neighbors: np.ndarray, smoothing: float = BEHAVIOR_SMOOTHING) -> np.ndarray:
    """Action frequencies over all neighbors with add-epsilon smoothing"""
    frequencies = _action_counts(index.actions[neighbors]) / neighbors.shape[1]
    return (frequencies + smoothing) / (1.0 + N_ACTIONS * smoothing)


def kernel_policy(index: NeighborIndex, state: np.ndarray, k: int = DEFAULT_K) -> PolicyDistribution:
    _, neighbors = index.query(state, k)
    return PolicyDistribution(kernel_from_neighbors(index, neighbors)[0])


def behavior_policy(
    index: NeighborIndex,
    state: np.ndarray,
    k: int = DEFAULT_K,
    smoothing: float = BEHAVIOR_SMOOTHING
) -> PolicyDistribution:
    _, neighbors = index.query(state, k)
    return PolicyDistribution(behavior_from_neighbors(index, neighbors, smoothing)[0])


class NeighborPolicies(NamedTuple):
    kernel: Dict[int, np.ndarray]  # k -> [Q, 25]
    behavior: np.ndarray  # [Q, 25]
    kth_distance: Dict[int, np.ndarray]  # kernel k -> [Q] distance to the k-th neighbor


def neighbor_policies(
    index: NeighborIndex,
    states: np.ndarray,
    kernel_ks: Iterable[int] = (DEFAULT_K,),
    behavior_k: int = DEFAULT_K,
    smoothing: float = BEHAVIOR_SMOOTHING,
    exclude: Optional[np.ndarray] = None
) -> NeighborPolicies:
    """Kernel, behavior and k-th distance from one neighbor search; smaller k reuse prefixes"""
    kernel_ks = sorted(set(int(k) for k in kernel_ks))
    k_max = max(kernel_ks + [behavior_k])
    distances, neighbors = index.query(states, k_max, exclude)
    return NeighborPolicies(
        kernel={k: kernel_from_neighbors(index, neighbors[:, :k]) for k in kernel_ks},
        behavior=behavior_from_neighbors(index, neighbors[:, :behavior_k], smoothing),
        kth_distance={k: distances[:, k - 1].copy() for k in kernel_ks},
    )


def restrict_policy_table(policies: np.ndarray, behaviors: np.ndarray, threshold: float = RESTRICTION_THRESHOLD) -> np.ndarray:
    """Row-wise restriction; rows with no allowed mass become the behavior argmax"""
    policies = np.atleast_2d(np.asarray(policies, dtype=np.float64))
    behaviors = np.atleast_2d(np.asarray(behaviors, dtype=np.float64))
    restricted = np.where(behaviors < threshold, 0.0, policies)
    totals = restricted.sum(axis=1, keepdims=True)
    fallback = np.zeros_like(restricted)
    fallback[np.arange(len(behaviors)), np.argmax(behaviors, axis=1)] = 1.0
    safe_totals = np.where(totals > 0, totals, 1.0)
    return np.where(totals > 0, restricted / safe_totals, fallback)


def restrict_actions(
    policy: PolicyDistribution,
    behavior: PolicyDistribution,
    threshold: float = RESTRICTION_THRESHOLD
) -> PolicyDistribution:
    return PolicyDistribution(restrict_policy_table(policy.probs, behavior.probs, threshold)[0])


def cross_validate_k(
    candidate_ks: Sequence[int],
    objective: Callable[[int], float],
    preferred: int = DEFAULT_K
) -> Tuple[int, Dict[int, float]]:
    """k with the highest validation WDR; ties go to the candidate closest to `preferred`"""
    if not candidate_ks:
        raise UsageError("cross_validate_k needs at least one candidate")
    scores = {int(k): float(objective(int(k))) for k in candidate_ks}
    for k, score in scores.items():
        logger.info(f"Kernel k={k}: validation WDR {score:.5f}")
    best = max(scores.values())
    tied = [k for k, score in scores.items() if score == best]
    selected = min(tied, key=lambda k: (abs(k - preferred), k))
    logger.info(f"Selected kernel k={selected}")
    return selected, scores


@dataclass
class Transitions:
    states: np.ndarray  # [N, D]
    actions: np.ndarray  # [N]
    rewards: np.ndarray  # [N]
    next_states: np.ndarray  # [N, D]
    terminals: np.ndarray  # [N] bool

    @property
    def size(self) -> int:
        return int(self.actions.size)


def build_transitions(
    encoded: Sequence[np.ndarray],
    trajectories: Sequence[ProcessedTrajectory],
    rewards: Sequence[np.ndarray]
) -> Transitions:
    """(s_t, a_t, r_t, s_t+1); the last step of each trajectory is terminal"""
    states, actions, step_rewards, next_states, terminals = [], [], [], [], []
    for states_i, trajectory, rewards_i in zip(encoded, trajectories, rewards):
        length = trajectory.length
        states.append(states_i)
        actions.append(trajectory.actions)
        step_rewards.append(rewards_i)
        # terminal rows carry their own state as a placeholder successor
        next_states.append(np.concatenate([states_i[1:], states_i[-1:]]))
        terminal = np.zeros(length, dtype=bool)
        terminal[-1] = True
        terminals.append(terminal)
    if not states:
        raise UsageError("no transitions to build")
    return Transitions(
        states=np.concatenate(states),
        actions=np.concatenate(actions).astype(int),
        rewards=np.concatenate(step_rewards).astype(float),
        next_states=np.concatenate(next_states),
        terminals=np.concatenate(terminals),
    )


@dataclass
class DDQNOptions:
    penalty_weight: float = 1.0
    reward_max: float = 3.0
    target_sync: int = 1000
    alpha: float = 0.6
    beta_start: float = 0.4
    beta_end: float = 1.0
    priority_floor: float = 1e-6
    trunk_dim: int = 128
    head_dim: int = 64
    n_actions: int = N_ACTIONS
    log_every: int = 1000


@dataclass
class QNetwork:
    """Dueling Q-network: online parts and their scheduled target copy"""
    online: Dict[str, ModelParams]
    target: Dict[str, ModelParams]
    options: DDQNOptions = field(default_factory=DDQNOptions)
    loss_log: List[float] = field(default_factory=list)

    @property
    def n_actions(self) -> int:
        return self.online["advantage"].spec.output_dim

    def sync_target(self) -> None:
        self.target = {name: params.copy() for name, params in self.online.items()}


def build_qnetwork(state_dim: int, options: Optional[DDQNOptions] = None, seed: int = 0) -> QNetwork:
    options = options or DDQNOptions()
    trunk_dim, head_dim = options.trunk_dim, options.head_dim
    online = {
        "trunk": init_params(dense_stack([state_dim, trunk_dim, trunk_dim], "relu", "relu", seed=seed)),
        "value": init_params(dense_stack([trunk_dim, head_dim, 1], "relu", seed=seed + 1)),
        "advantage": init_params(dense_stack([trunk_dim, head_dim, options.n_actions], "relu", seed=seed + 2)),
    }
    qnet = QNetwork(online=online, target={}, options=options)
    qnet.sync_target()
    return qnet


def _dueling_forward(parts: Dict[str, ModelParams], states: np.ndarray):
    features, trunk_cache = forward(parts["trunk"], states)
    value, value_cache = forward(parts["value"], features)
    advantage, advantage_cache = forward(parts["advantage"], features)
    q = value + advantage - advantage.mean(axis=1, keepdims=True)
    return q, advantage, (trunk_cache, value_cache, advantage_cache)


def _dueling_backward(parts: Dict[str, ModelParams], caches, grad_q: np.ndarray) -> Dict[str, np.ndarray]:
    trunk_cache, value_cache, advantage_cache = caches
    grad_value = grad_q.sum(axis=1, keepdims=True)
    grad_advantage = grad_q - grad_q.mean(axis=1, keepdims=True)
    value_grads = backward_all(parts["value"], value_cache, grad_value)
    advantage_grads = backward_all(parts["advantage"], advantage_cache, grad_advantage)
    trunk_grad = backward(parts["trunk"], trunk_cache, value_grads.inputs + advantage_grads.inputs)
    return {"trunk": trunk_grad, "value": value_grads.params, "advantage": advantage_grads.params}


def q_values(qnet: QNetwork, states: np.ndarray, use_target: bool = False) -> np.ndarray:
    """Q(s, .) for a batch of states: [N, n_actions]"""
    q, _, _ = _dueling_forward(qnet.target if use_target else qnet.online, np.atleast_2d(states))
    return q


def advantages(qnet: QNetwork, states: np.ndarray) -> np.ndarray:
    _, advantage, _ = _dueling_forward(qnet.online, np.atleast_2d(states))
    return advantage


def double_q_target(
    qnet: QNetwork,
    rewards: np.ndarray,
    next_states: np.ndarray,
    terminals: np.ndarray,
    discount: float
) -> np.ndarray:
    """r + gamma * Q(s', argmax_a Q(s', a; online); target); r alone on terminal steps"""
    greedy = np.argmax(q_values(qnet, next_states), axis=1)
    evaluated = q_values(qnet, next_states, use_target=True)[np.arange(len(greedy)), greedy]
    return rewards + discount * np.where(terminals, 0.0, evaluated)


def td_loss(
    qnet: QNetwork,
    batch: Transitions,
    targets: np.ndarray,
    sample_weights: np.ndarray,
    penalty_weight: float,
    reward_max: float
) -> Tuple[float, np.ndarray, Dict[str, np.ndarray]]:
    """
    Importance-weighted mean of (y - Q(s,a))^2 + penalty_weight * max(|Q(s,a)| - reward_max, 0).
    Returns the loss, TD errors and per-part gradients.
    """
    q, _, caches = _dueling_forward(qnet.online, batch.states)
    rows = np.arange(batch.size)
    chosen = q[rows, batch.actions]
    td_errors = targets - chosen
    excess = np.abs(chosen) - reward_max
    loss = float(np.mean(sample_weights * (td_errors ** 2 + penalty_weight * np.maximum(excess, 0.0))))

    grad_chosen = sample_weights * (-2.0 * td_errors + penalty_weight * np.sign(chosen) * (excess > 0)) / batch.size
    grad_q = np.zeros_like(q)
    grad_q[rows, batch.actions] = grad_chosen
    return loss, td_errors, _dueling_backward(qnet.online, caches, grad_q)


class ReplayBuffer:
    """Proportional prioritized replay over a fixed transition set"""

    def __init__(self, transitions: Transitions, alpha: float = 0.6, priority_floor: float = 1e-6):
        if transitions.size == 0:
            raise UsageError("replay buffer needs at least one transition")
        self.transitions = transitions
        self.alpha = alpha
        self.priority_floor = priority_floor
        self.priorities = np.ones(transitions.size)

    @property
    def capacity(self) -> int:
        return self.transitions.size

    def probabilities(self) -> np.ndarray:
        scaled = self.priorities ** self.alpha
        return scaled / scaled.sum()

    def sample(self, rng: np.random.Generator, batch_size: int, beta: float) -> Tuple[np.ndarray, np.ndarray, Transitions]:
        probs = self.probabilities()
        indices = rng.choice(self.capacity, size=batch_size, replace=True, p=probs)
        weights = (self.capacity * probs[indices]) ** (-beta)
        weights /= (self.capacity * probs.min()) ** (-beta)
        batch = Transitions(
            states=self.transitions.states[indices],
            actions=self.transitions.actions[indices],
            rewards=self.transitions.rewards[indices],
            next_states=self.transitions.next_states[indices],
            terminals=self.transitions.terminals[indices],
        )
        return indices, weights, batch

    def update(self, indices: np.ndarray, td_errors: np.ndarray) -> None:
        self.priorities[indices] = np.abs(td_errors) + self.priority_floor


def train_ddqn(
    transitions: Transitions,
    config: Optional[TrainingConfig] = None,
    options: Optional[DDQNOptions] = None
) -> QNetwork:
    """Dueling double DQN on a fixed transition set with prioritized replay"""
    config = config or TrainingConfig(batch_size=30, epochs=None, steps=20000)
    options = options or DDQNOptions()
    if config.steps is None or config.steps < 1:
        raise UsageError("train_ddqn needs a positive step count")

    qnet = build_qnetwork(transitions.states.shape[1], options, seed=config.seed)
    buffer = ReplayBuffer(transitions, options.alpha, options.priority_floor)
    rng = np.random.default_rng(config.seed)
    moving_loss = None

    for step in range(1, config.steps + 1):
        progress = (step - 1) / max(config.steps - 1, 1)
        beta = options.beta_start + (options.beta_end - options.beta_start) * progress
        indices, weights, batch = buffer.sample(rng, config.batch_size, beta)

        targets = double_q_target(qnet, batch.rewards, batch.next_states, batch.terminals, config.discount)
        loss, td_errors, grads = td_loss(qnet, batch, targets, weights, options.penalty_weight, options.reward_max)
        if not np.isfinite(loss):
            raise TrainingError("TD loss diverged", step=step)
        for name, params in qnet.online.items():
            adam_step(params, grads[name], config)
        buffer.update(indices, td_errors)

        moving_loss = loss if moving_loss is None else 0.99 * moving_loss + 0.01 * loss
        if step % options.target_sync == 0:
            qnet.sync_target()
        if step % options.log_every == 0 or step == config.steps:
            qnet.loss_log.append(moving_loss)
            logger.info(f"DDQN step {step:,}/{config.steps:,}: moving TD loss {moving_loss:.5f}")

    return qnet


def dqn_policy(qnet: QNetwork, state: np.ndarray, temperature: float = 1.0) -> PolicyDistribution:
    """Softmax of the advantage stream"""
    return PolicyDistribution(softmax(advantages(qnet, state)[0], temperature))


def dqn_policy_table(qnet: QNetwork, states: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    return softmax(advantages(qnet, states), temperature, axis=1)


def save_qnetwork(path: Path, qnet: QNetwork) -> Path:
    models = {f"online.{name}": params for name, params in qnet.online.items()}
    models.update({f"target.{name}": params for name, params in qnet.target.items()})
    return save_models(path, models, {"options": asdict(qnet.options), "loss_log": qnet.loss_log})


def load_qnetwork(path: Path) -> QNetwork:
    models, header = load_models(path)
    online = {name.split(".", 1)[1]: params for name, params in models.items() if name.startswith("online.")}
    target = {name.split(".", 1)[1]: params for name, params in models.items() if name.startswith("target.")}
    return QNetwork(online=online, target=target, options=DDQNOptions(**header["options"]),
                    loss_log=list(header["loss_log"]))
