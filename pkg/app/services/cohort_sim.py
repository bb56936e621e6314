"""
Synthetic sepsis-like cohorts from a known latent-state MDP, plus exact
dynamic-programming oracles (policy value, value functions, mortality rate).
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.special import expit

from app.core.exceptions import ConfigurationError, NumericalError, UsageError
from app.core.logging_config import get_logger
from app.utils.features import FEATURE_CATALOG, N_ACTIONS, N_FEATURES, action_bins
from app.utils.validators import check_stochastic_rows

logger = get_logger(__name__)

SURVIVOR = 0
NON_SURVIVOR = 1

MAX_SWEEPS = 1_000_000
CONVERGENCE_TOLERANCE = 1e-12


@dataclass(frozen=True, eq=False)
class SimMDP:
    """Immutable latent-state MDP with Gaussian emissions over the 45 observation features"""
    transition_tensor: np.ndarray  # [latent, action, latent]
    emission_means: np.ndarray  # [latent, feature]
    emission_stds: np.ndarray
    mortality_logit_weights: np.ndarray  # [latent]
    behavior_policy_table: np.ndarray  # [latent, action]
    initial_distribution: np.ndarray  # [latent]
    reward_table: np.ndarray  # [latent, action]
    horizon_max: Optional[int]  # None means an infinite horizon (oracles only)
    discount: float
    absorbing: np.ndarray  # [latent] bool
    death_state: Optional[int] = None
    iv_dose_edges: Tuple[float, ...] = (50.0, 180.0, 530.0, 1500.0)  # mL / 4h
    vaso_dose_edges: Tuple[float, ...] = (0.08, 0.22, 0.45, 1.2)  # mcg / kg / min

    def __post_init__(self):
        for name in ("transition_tensor", "emission_means", "emission_stds", "mortality_logit_weights",
                     "behavior_policy_table", "initial_distribution", "reward_table", "absorbing"):
            array = np.array(getattr(self, name), dtype=bool if name == "absorbing" else float)
            array.setflags(write=False)
            object.__setattr__(self, name, array)

        n_latent = self.transition_tensor.shape[0]
        if n_latent < 1:
            raise ConfigurationError("latent_state_count must be positive", field="transition_tensor")
        if self.transition_tensor.shape != (n_latent, N_ACTIONS, n_latent):
            raise ConfigurationError(
                f"transition_tensor must have shape ({n_latent}, {N_ACTIONS}, {n_latent}), "
                f"got {self.transition_tensor.shape}", field="transition_tensor")
        if self.emission_means.shape != (n_latent, N_FEATURES) or self.emission_stds.shape != (n_latent, N_FEATURES):
            raise ConfigurationError(f"emissions must yield exactly {N_FEATURES} features per step", field="emission_means")
        if np.any(self.emission_stds < 0):
            raise ConfigurationError("emission spreads must be non-negative", field="emission_stds")
        for name, shape in (("behavior_policy_table", (n_latent, N_ACTIONS)), ("reward_table", (n_latent, N_ACTIONS)),
                            ("initial_distribution", (n_latent,)), ("mortality_logit_weights", (n_latent,)),
                            ("absorbing", (n_latent,))):
            if getattr(self, name).shape != shape:
                raise ConfigurationError(f"{name} must have shape {shape}", field=name)

        check_stochastic_rows(self.transition_tensor, "transition_tensor")
        check_stochastic_rows(self.behavior_policy_table, "behavior_policy_table")
        check_stochastic_rows(self.initial_distribution, "initial_distribution")

        if np.any(self.initial_distribution[self.absorbing] > 0):
            raise ConfigurationError("initial_distribution puts mass on an absorbing state", field="initial_distribution")
        for s in np.flatnonzero(self.absorbing):
            if not np.all(self.transition_tensor[s, :, s] == 1.0):
                raise ConfigurationError(f"absorbing state {s} must self-loop under every action", field="transition_tensor")
        if self.death_state is not None and not self.absorbing[self.death_state]:
            raise ConfigurationError("death_state must be absorbing", field="death_state")
        if self.horizon_max is not None and self.horizon_max < 1:
            raise ConfigurationError("horizon_max must be >= 1", field="horizon_max")
        if not 0.0 < self.discount <= 1.0:
            raise ConfigurationError("discount must lie in (0, 1]", field="discount")

    @property
    def latent_state_count(self) -> int:
        return self.transition_tensor.shape[0]

    @property
    def action_count(self) -> int:
        return self.transition_tensor.shape[1]


@dataclass
class RawTrajectory:
    """One patient's raw 4-hour windows"""
    patient_id: str
    observations: np.ndarray  # [T, 45] raw physical values
    iv_doses: np.ndarray  # [T] mL / 4h
    vaso_doses: np.ndarray  # [T] mcg / kg / min
    outcome: int  # SURVIVOR or NON_SURVIVOR
    latent_trace: Optional[np.ndarray] = None  # simulator only
    intended_actions: Optional[np.ndarray] = None
    sim_rewards: Optional[np.ndarray] = None

    @property
    def length(self) -> int:
        return int(self.observations.shape[0])

    @property
    def steps(self) -> List[Tuple[np.ndarray, float, float]]:
        return [(self.observations[t], float(self.iv_doses[t]), float(self.vaso_doses[t])) for t in range(self.length)]


@dataclass
class ValueFunctions:
    """Exact state and action values; stage h holds values with h decisions remaining"""
    state_values: np.ndarray  # [stages, latent]
    action_values: np.ndarray  # [stages, latent, action]
    horizon: Optional[int]
    sweeps: int = field(default=0)

    def state_value(self, t: int, s: int) -> float:
        return float(self.state_values[self._stage(t), s])

    def action_value(self, t: int, s: int, a: int) -> float:
        return float(self.action_values[self._stage(t), s, a])

    def _stage(self, t: int) -> int:
        if self.horizon is None:
            return 0
        return max(self.horizon - t, 0)


def default_sim_mdp(horizon: int = 20, discount: float = 0.99) -> SimMDP:
    """
    Eight latent states: severities 0 (mild) to 5 (critical), then absorbing death
    and discharge. Treatment near the severity's ideal dose improves the odds of
    recovery; clinicians act near the ideal with softmax noise.
    """
    n_severity = 6
    death, discharge = 6, 7
    n_latent = 8
    ideal_iv = [0, 1, 2, 3, 3, 4]
    ideal_vaso = [0, 0, 0, 1, 2, 3]

    transitions = np.zeros((n_latent, N_ACTIONS, n_latent))
    behavior = np.zeros((n_latent, N_ACTIONS))
    for s in range(n_severity):
        mismatch = np.array([abs(action_bins(a)[0] - ideal_iv[s]) + abs(action_bins(a)[1] - ideal_vaso[s])
                             for a in range(N_ACTIONS)], dtype=float)
        p_improve = 0.30 * np.exp(-0.35 * mismatch)
        p_worsen = 0.08 + 0.03 * mismatch + 0.02 * s
        better = discharge if s == 0 else s - 1
        worse = death if s == n_severity - 1 else s + 1
        transitions[s, :, better] += p_improve
        transitions[s, :, worse] += p_worsen
        transitions[s, :, s] += 1.0 - p_improve - p_worsen

        preference = np.exp(-1.2 * mismatch)
        preference = 0.98 * preference / preference.sum() + 0.02 / N_ACTIONS
        behavior[s] = preference / preference.sum()

    for s in (death, discharge):
        transitions[s, :, s] = 1.0
        behavior[s] = 1.0 / N_ACTIONS

    logits = np.array([-3.5 + 1.1 * s for s in range(n_severity)] + [6.0, -6.0])
    # expected change in negative mortality log-odds
    rewards = logits[:, None] - transitions @ logits
    rewards[[death, discharge]] = 0.0

    means = np.zeros((n_latent, N_FEATURES))
    stds = np.zeros((n_latent, N_FEATURES))
    for j, spec in enumerate(FEATURE_CATALOG):
        for s in range(n_latent):
            severity = min(s, n_severity - 1) if s != discharge else 0
            means[s, j] = spec.healthy_mean + spec.severity_slope * severity
            stds[s, j] = spec.spread

    initial = np.array([0.25, 0.30, 0.20, 0.13, 0.08, 0.04, 0.0, 0.0])
    absorbing = np.zeros(n_latent, dtype=bool)
    absorbing[[death, discharge]] = True

    return SimMDP(
        transition_tensor=transitions / transitions.sum(axis=2, keepdims=True),
        emission_means=means,
        emission_stds=stds,
        mortality_logit_weights=logits,
        behavior_policy_table=behavior,
        initial_distribution=initial,
        reward_table=rewards,
        horizon_max=horizon,
        discount=discount,
        absorbing=absorbing,
        death_state=death,
    )


def _draw(rng: np.random.Generator, probs: np.ndarray) -> int:
    cumulative = np.cumsum(probs)
    return int(min(np.searchsorted(cumulative, rng.random() * cumulative[-1], side="right"), len(probs) - 1))


def _dose(rng: np.random.Generator, edges: Tuple[float, ...], dose_bin: int) -> float:
    """Uniform dose in (lower, upper] of the bin; exactly zero for bin 0"""
    if dose_bin == 0:
        return 0.0
    upper = edges[dose_bin - 1]
    lower = 0.0 if dose_bin == 1 else edges[dose_bin - 2]
    return float(upper - (upper - lower) * rng.random())


def _emit(mdp: SimMDP, rng: np.random.Generator, s: int, static_values: Optional[np.ndarray]) -> np.ndarray:
    values = mdp.emission_means[s] + mdp.emission_stds[s] * rng.standard_normal(N_FEATURES)
    for j, spec in enumerate(FEATURE_CATALOG):
        if spec.static and static_values is not None:
            values[j] = static_values[j]
        values[j] = min(max(values[j], spec.low), spec.high)
    return values


def _simulate_patient(mdp: SimMDP, policy_table: np.ndarray, seed: int, index: int) -> RawTrajectory:
    # independent stream per (seed, patient)
    rng = np.random.default_rng([seed, index])
    s = _draw(rng, mdp.initial_distribution)
    static_values = _emit(mdp, rng, s, None)

    observations, iv, vaso, latent, actions, rewards = [], [], [], [], [], []
    for _ in range(mdp.horizon_max):
        if mdp.absorbing[s]:
            break
        a = _draw(rng, policy_table[s])
        iv_bin, vaso_bin = action_bins(a)
        observations.append(_emit(mdp, rng, s, static_values))
        iv.append(_dose(rng, mdp.iv_dose_edges, iv_bin))
        vaso.append(_dose(rng, mdp.vaso_dose_edges, vaso_bin))
        latent.append(s)
        actions.append(a)
        rewards.append(mdp.reward_table[s, a])
        s = _draw(rng, mdp.transition_tensor[s, a])

    if mdp.death_state is not None and s == mdp.death_state:
        outcome = NON_SURVIVOR
    elif mdp.absorbing[s]:
        outcome = SURVIVOR
    else:
        # censored at the horizon
        outcome = NON_SURVIVOR if rng.random() < expit(mdp.mortality_logit_weights[s]) else SURVIVOR
    latent.append(s)

    return RawTrajectory(
        patient_id=f"p{index:06d}",
        observations=np.array(observations),
        iv_doses=np.array(iv),
        vaso_doses=np.array(vaso),
        outcome=outcome,
        latent_trace=np.array(latent, dtype=int),
        intended_actions=np.array(actions, dtype=int),
        sim_rewards=np.array(rewards),
    )


def generate_cohort(
    mdp: SimMDP,
    n_patients: int,
    seed: int,
    policy_table: Optional[np.ndarray] = None,
    workers: int = 1
) -> List[RawTrajectory]:
    """
    Simulate n_patients trajectories. The latent trace includes the state reached
    after the final decision. Output depends only on (mdp, n_patients, seed, policy).
    """
    if n_patients < 1:
        raise UsageError("n_patients must be >= 1")
    if mdp.horizon_max is None:
        raise UsageError("generate_cohort needs a finite horizon_max")
    if policy_table is None:
        policy_table = mdp.behavior_policy_table
    else:
        policy_table = np.asarray(policy_table, dtype=float)
        check_stochastic_rows(policy_table, "policy_table", tol=1e-9)

    chunk_size = max(1, (n_patients + workers - 1) // workers)
    chunks = [range(start, min(start + chunk_size, n_patients)) for start in range(0, n_patients, chunk_size)]

    def simulate_chunk(indices):
        return [_simulate_patient(mdp, policy_table, seed, index) for index in indices]

    with ThreadPoolExecutor(max_workers=max(1, min(workers, len(chunks)))) as executor:
        results = list(executor.map(simulate_chunk, chunks))

    cohort = [trajectory for chunk in results for trajectory in chunk]
    died = sum(trajectory.outcome for trajectory in cohort)
    logger.info(f"Simulated {len(cohort):,} patients (seed={seed}); non-survivors: {died / len(cohort):.3f}")
    return cohort


def _policy_matrices(mdp: SimMDP, policy_table: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """State-to-state transitions and expected rewards under a policy, absorbing states zeroed"""
    transitions = np.einsum("sa,sat->st", policy_table, mdp.transition_tensor)
    rewards = np.einsum("sa,sa->s", policy_table, mdp.reward_table)
    live = ~mdp.absorbing
    return transitions * live[:, None], rewards * live


def exact_value_functions(mdp: SimMDP, policy_table: np.ndarray, discount: Optional[float] = None) -> ValueFunctions:
    """
    Bellman expectation iteration. Finite horizons stop after horizon_max sweeps
    (the time-indexed fixed point); infinite horizons iterate until the sup-norm
    residual drops below 1e-12.
    """
    policy_table = np.asarray(policy_table, dtype=float)
    check_stochastic_rows(policy_table, "policy_table", tol=1e-9)
    gamma = mdp.discount if discount is None else discount
    live = (~mdp.absorbing).astype(float)
    rewards_sa = mdp.reward_table * live[:, None]
    continuation = mdp.transition_tensor * live[:, None, None]

    def backup(values: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        q = rewards_sa + gamma * continuation @ values
        v = np.einsum("sa,sa->s", policy_table, q)
        return v, q

    n_latent = mdp.latent_state_count
    if mdp.horizon_max is not None:
        state_values = [np.zeros(n_latent)]
        action_values = [np.zeros((n_latent, N_ACTIONS))]
        for _ in range(mdp.horizon_max):
            v, q = backup(state_values[-1])
            state_values.append(v)
            action_values.append(q)
        return ValueFunctions(np.array(state_values), np.array(action_values), mdp.horizon_max, mdp.horizon_max)

    v = np.zeros(n_latent)
    for sweep in range(1, MAX_SWEEPS + 1):
        v_next, q = backup(v)
        residual = np.max(np.abs(v_next - v))
        v = v_next
        if residual < CONVERGENCE_TOLERANCE:
            return ValueFunctions(v[None, :], q[None, :, :], None, sweep)
        if not np.isfinite(residual):
            break
    raise NumericalError(f"policy evaluation did not converge after {MAX_SWEEPS} sweeps")


def exact_policy_value(mdp: SimMDP, policy_table: np.ndarray, discount: Optional[float] = None) -> float:
    """V^pi of the start distribution"""
    values = exact_value_functions(mdp, policy_table, discount)
    return float(mdp.initial_distribution @ values.state_values[-1 if mdp.horizon_max is not None else 0])


def mortality_probability(mdp: SimMDP, policy_table: Optional[np.ndarray] = None) -> float:
    """Absorption into death within the horizon plus censored mortality at the horizon"""
    if mdp.horizon_max is None:
        raise UsageError("mortality_probability needs a finite horizon_max")
    policy_table = mdp.behavior_policy_table if policy_table is None else np.asarray(policy_table, dtype=float)
    transitions = np.einsum("sa,sat->st", policy_table, mdp.transition_tensor)

    occupancy = mdp.initial_distribution.copy()
    for _ in range(mdp.horizon_max):
        occupancy = occupancy @ transitions

    died = occupancy[mdp.death_state] if mdp.death_state is not None else 0.0
    censored = ~mdp.absorbing
    died += float(occupancy[censored] @ expit(mdp.mortality_logit_weights[censored]))
    return float(died)


def discounted_returns(cohort: List[RawTrajectory], discount: float) -> np.ndarray:
    """Per-patient discounted sum of simulator rewards"""
    returns = []
    for trajectory in cohort:
        if trajectory.sim_rewards is None:
            raise UsageError(f"{trajectory.patient_id} carries no simulator rewards")
        returns.append(float(np.sum(trajectory.sim_rewards * discount ** np.arange(trajectory.length))))
    return np.array(returns)


def ground_truth_payload(mdp: SimMDP, cohort: List[RawTrajectory], seed: int) -> Dict:
    """JSON sidecar for oracle checks"""
    return {
        "seed": seed,
        "discount": mdp.discount,
        "horizon_max": mdp.horizon_max,
        "exact_behavior_value": exact_policy_value(mdp, mdp.behavior_policy_table),
        "exact_mortality_probability": mortality_probability(mdp),
        "iv_dose_edges": list(mdp.iv_dose_edges),
        "vaso_dose_edges": list(mdp.vaso_dose_edges),
        "patients": {
            trajectory.patient_id: {
                "latent_trace": trajectory.latent_trace.tolist(),
                "intended_actions": trajectory.intended_actions.tolist(),
                "sim_rewards": trajectory.sim_rewards.tolist(),
            }
            for trajectory in cohort
        },
    }
