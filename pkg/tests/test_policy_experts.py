import numpy as np
import pytest

from app.core.exceptions import UsageError
from app.models import TrainingConfig
from app.services.neural_core import check_gradient
from app.services.policy_experts import (
    BEHAVIOR_SMOOTHING,
    DDQNOptions,
    NeighborIndex,
    PolicyDistribution,
    ReplayBuffer,
    Transitions,
    behavior_from_neighbors,
    behavior_policy,
    build_neighbor_index,
    build_qnetwork,
    build_transitions,
    cross_validate_k,
    double_q_target,
    dqn_policy,
    dqn_policy_table,
    kernel_from_neighbors,
    kernel_policy,
    load_qnetwork,
    neighbor_policies,
    q_values,
    restrict_actions,
    restrict_policy_table,
    save_qnetwork,
    td_loss,
    train_ddqn,
)
from app.utils.features import N_ACTIONS
from tests.conftest import random_policy_table


def small_index(rng, n=60, width=3):
    # coarse grid values create exact distance ties
    states = rng.integers(0, 3, size=(n, width)).astype(float)
    patient_ids = [f"p{i % 7}" for i in range(n)]
    timesteps = np.arange(n) // 7
    return NeighborIndex(
        states=states,
        actions=rng.integers(0, N_ACTIONS, size=n),
        outcomes=rng.integers(0, 2, size=n),
        patient_ids=patient_ids,
        timesteps=timesteps,
    ), states, patient_ids, timesteps


def test_query_matches_brute_force_with_tie_rule(rng):
    index, states, patient_ids, timesteps = small_index(rng)
    queries = rng.integers(0, 3, size=(10, 3)).astype(float)
    distances, rows = index.query(queries, 12)

    for q, query in enumerate(queries):
        expected = sorted(
            (float(np.linalg.norm(state - query)), patient_ids[i], int(timesteps[i]))
            for i, state in enumerate(states)
        )[:12]
        found = [(float(d), str(index.patient_ids[r]), int(index.timesteps[r])) for d, r in zip(distances[q], rows[q])]
        assert [(pid, t) for _, pid, t in found] == [(pid, t) for _, pid, t in expected]
        np.testing.assert_allclose([d for d, _, _ in found], [d for d, _, _ in expected])



def test_query_and_policies_match_brute_force_in_high_dimensions(rng):
    n, width, k = 1000, 128, 300
    states = rng.normal(size=(n, width))
    actions = rng.integers(0, N_ACTIONS, size=n)
    outcomes = rng.integers(0, 2, size=n)
    patient_ids = [f"p{i // 8:04d}" for i in range(n)]
    timesteps = np.arange(n) % 8
    # shuffled input rows; the index sorts them itself
    order = rng.permutation(n)
    index = NeighborIndex(states[order], actions[order], outcomes[order],
                          [patient_ids[i] for i in order], timesteps[order])

    for query in rng.normal(size=(5, width)):
        distances = np.sqrt(((states - query) ** 2).sum(axis=1))
        expected = sorted(range(n), key=lambda i: (distances[i], patient_ids[i], timesteps[i]))[:k]

        found_distances, rows = index.query(query, k)
        assert [(index.patient_ids[r], index.timesteps[r]) for r in rows[0]] == \
            [(patient_ids[i], timesteps[i]) for i in expected]
        np.testing.assert_allclose(found_distances[0], distances[expected], rtol=1e-12)

        counts = np.bincount(actions[expected], minlength=N_ACTIONS).astype(float)
        survivor_counts = np.bincount(actions[expected][outcomes[expected] == 0], minlength=N_ACTIONS).astype(float)
        np.testing.assert_allclose(kernel_policy(index, query, k).probs, survivor_counts / survivor_counts.sum(), rtol=1e-14)
        np.testing.assert_allclose(
            behavior_policy(index, query, k, smoothing=1e-3).probs,
            (counts / k + 1e-3) / (1.0 + N_ACTIONS * 1e-3),
            rtol=1e-14,
        )


def test_indexed_states_can_leave_themselves_out(rng):
    index, states, patient_ids, timesteps = small_index(rng, n=30)
    distances, rows = index.query(states, 29, exclude=index.input_rows)

    for i, state in enumerate(states):
        own = index.input_rows[i]
        assert (index.patient_ids[own], index.timesteps[own]) == (patient_ids[i], timesteps[i])
        assert own not in rows[i]
        expected = sorted(
            (float(np.linalg.norm(other - state)), patient_ids[j], int(timesteps[j]))
            for j, other in enumerate(states) if j != i
        )
        assert [(str(index.patient_ids[r]), int(index.timesteps[r])) for r in rows[i]] == [(pid, t) for _, pid, t in expected]

    # the left-out state no longer counts toward its own behavior estimate
    loo = neighbor_policies(index, states, [5], 29, exclude=index.input_rows)
    counts = np.zeros((30, N_ACTIONS))
    np.add.at(counts, (np.repeat(np.arange(30), 29), index.actions[rows].ravel()), 1.0)
    np.testing.assert_allclose(loo.behavior, (counts / 29 + BEHAVIOR_SMOOTHING) / (1 + N_ACTIONS * BEHAVIOR_SMOOTHING))
    np.testing.assert_array_equal(loo.kth_distance[5], distances[:, 4])

    with pytest.raises(UsageError):
        index.query(states, 30, exclude=index.input_rows)
    with pytest.raises(UsageError):
        index.query(states, 3, exclude=index.input_rows[:5])


def test_query_preconditions(rng):
    index, *_ = small_index(rng, n=10)
    with pytest.raises(UsageError):
        index.query(np.zeros(3), 0)
    with pytest.raises(UsageError):
        index.query(np.zeros(3), 11)
    with pytest.raises(UsageError):
        index.query(np.zeros(4), 2)
    assert index.query(np.zeros(3), 10)[1].shape == (1, 10)


def test_kernel_uses_surviving_neighbors():
    index = NeighborIndex(
        states=np.array([[0.0], [1.0], [2.0], [3.0]]),
        actions=np.array([3, 4, 4, 7]),
        outcomes=np.array([0, 1, 0, 1]),
        patient_ids=["a", "b", "c", "d"],
        timesteps=np.zeros(4, dtype=int),
    )
    policy = kernel_policy(index, np.array([0.0]), k=4)
    assert policy.probs[3] == 0.5 and policy.probs[4] == 0.5 and policy.probs[7] == 0.0

    # only non-survivors among the neighbors: fall back to every neighbor
    _, neighbors = index.query(np.array([[3.0]]), 1)
    np.testing.assert_array_equal(kernel_from_neighbors(index, neighbors)[0], np.eye(N_ACTIONS)[7])


def test_behavior_policy_is_smoothed(rng):
    index, *_ = small_index(rng)
    _, neighbors = index.query(rng.integers(0, 3, size=(5, 3)).astype(float), 20)
    behavior = behavior_from_neighbors(index, neighbors, smoothing=1e-3)
    assert np.all(behavior > 0)
    np.testing.assert_allclose(behavior.sum(axis=1), 1.0)



def test_behavior_smoothing_of_a_unanimous_neighborhood():
    index = NeighborIndex(
        states=np.arange(300, dtype=float)[:, None],
        actions=np.full(300, 5),
        outcomes=np.zeros(300, dtype=int),
        patient_ids=[f"p{i:03d}" for i in range(300)],
        timesteps=np.zeros(300, dtype=int),
    )
    policy = behavior_policy(index, np.array([10.0]), k=300)
    assert policy.probs[5] == pytest.approx((1 + 1e-3) / (1 + 25e-3))
    assert policy.probs[5] == pytest.approx(0.9766, abs=1e-4)
    others = np.delete(policy.probs, 5)
    np.testing.assert_allclose(others, 1e-3 / (1 + 25e-3))
    assert others[0] == pytest.approx(9.76e-4, abs=1e-6)


def test_neighbor_policies_share_one_search(rng):
    index, *_ = small_index(rng)
    queries = rng.integers(0, 3, size=(4, 3)).astype(float)
    policies = neighbor_policies(index, queries, kernel_ks=(5, 10), behavior_k=8)
    distances, neighbors = index.query(queries, 10)
    np.testing.assert_allclose(policies.kernel[5], kernel_from_neighbors(index, neighbors[:, :5]))
    np.testing.assert_allclose(policies.behavior, behavior_from_neighbors(index, neighbors[:, :8]))
    np.testing.assert_allclose(policies.kth_distance[10], distances[:, 9])


def test_index_from_trajectories(trajectory_factory):
    trajectories = [trajectory_factory("b", 3, outcome=1), trajectory_factory("a", 2)]
    encoded = [t.observations[:, :4] for t in trajectories]
    index = build_neighbor_index(encoded, trajectories)
    assert index.size == 5
    assert list(index.patient_ids) == ["a", "a", "b", "b", "b"]
    assert list(index.timesteps) == [0, 1, 0, 1, 2]
    np.testing.assert_array_equal(index.outcomes, [0, 0, 1, 1, 1])


def test_restriction_zeroes_rare_actions(rng):
    policies = random_policy_table(rng, 50)
    behaviors = random_policy_table(rng, 50)
    restricted = restrict_policy_table(policies, behaviors, threshold=0.04)
    np.testing.assert_allclose(restricted.sum(axis=1), 1.0)
    allowed = behaviors >= 0.04
    has_mass = (policies * allowed).sum(axis=1) > 0
    assert np.all(restricted[has_mass][~allowed[has_mass]] == 0.0)
    np.testing.assert_allclose(
        restricted[has_mass] / restricted[has_mass].max(axis=1, keepdims=True),
        (policies * allowed)[has_mass] / (policies * allowed)[has_mass].max(axis=1, keepdims=True),
    )



def test_restriction_invariant_on_random_pairs(rng):
    # sparse Dirichlet draws put plenty of behavior mass below the threshold
    policies = rng.dirichlet(np.full(N_ACTIONS, 0.3), size=10_000)
    behaviors = rng.dirichlet(np.full(N_ACTIONS, 0.3), size=10_000)
    restricted = restrict_policy_table(policies, behaviors, threshold=0.01)
    assert np.any(behaviors < 0.01)
    assert np.all(restricted >= 0)
    np.testing.assert_allclose(restricted.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(restricted[behaviors < 0.01] == 0.0)


def test_restrict_actions_examples():
    uniform = PolicyDistribution(np.full(N_ACTIONS, 1.0 / N_ACTIONS))
    dqn = PolicyDistribution(np.linspace(1.0, 2.0, N_ACTIONS) / np.linspace(1.0, 2.0, N_ACTIONS).sum())

    # every action is taken 4% of the time: nothing to remove
    np.testing.assert_allclose(restrict_actions(dqn, uniform).probs, dqn.probs)
    # a single clinician action leaves only that action
    np.testing.assert_array_equal(restrict_actions(uniform, PolicyDistribution.point_mass(0)).probs, np.eye(N_ACTIONS)[0])


def test_restriction_falls_back_to_behavior_argmax():
    policy = np.eye(N_ACTIONS)[[2]]
    behavior = np.full((1, N_ACTIONS), 0.5 / 24)
    behavior[0, 2] = 0.0
    behavior[0, 9] = 0.5
    np.testing.assert_array_equal(restrict_policy_table(policy, behavior, 0.1)[0], np.eye(N_ACTIONS)[9])


def test_cross_validation_prefers_default_on_ties():
    scores = {200: 1.0, 250: 2.0, 350: 2.0, 400: 2.0}
    selected, reported = cross_validate_k(list(scores), scores.get, preferred=300)
    assert selected == 250
    assert reported == scores
    assert cross_validate_k([200, 400], {200: 0.0, 400: 1.0}.get)[0] == 400
    with pytest.raises(UsageError):
        cross_validate_k([], lambda k: 0.0)


def test_transitions_mark_terminal_steps(trajectory_factory):
    trajectories = [trajectory_factory("a", 3), trajectory_factory("b", 1)]
    encoded = [t.observations[:, :2] for t in trajectories]
    rewards = [np.array([0.1, 0.2, 0.0]), np.array([0.0])]
    transitions = build_transitions(encoded, trajectories, rewards)
    assert transitions.size == 4
    np.testing.assert_array_equal(transitions.terminals, [False, False, True, True])
    np.testing.assert_array_equal(transitions.next_states[0], encoded[0][1])


def one_step_transitions(n_actions=3, repeats=20):
    """Two one-hot states, every action logged, reward 1 only for action 0"""
    states = np.repeat(np.eye(2), n_actions * repeats, axis=0)
    actions = np.tile(np.arange(n_actions), 2 * repeats)
    return Transitions(
        states=states,
        actions=actions,
        rewards=(actions == 0).astype(float),
        next_states=states.copy(),
        terminals=np.ones(len(actions), dtype=bool),
    )


def test_td_loss_gradients(rng):
    options = DDQNOptions(trunk_dim=5, head_dim=4, n_actions=3, reward_max=0.05)
    qnet = build_qnetwork(2, options, seed=3)
    # nonzero biases keep every ReLU away from its kink
    for params in qnet.online.values():
        params.assign(params.vector + rng.normal(scale=0.1, size=params.size))
    batch = one_step_transitions(repeats=2)
    targets = batch.rewards + 0.3
    weights = rng.random(batch.size)
    _, _, grads = td_loss(qnet, batch, targets, weights, 0.5, 0.05)

    for name in ("trunk", "value", "advantage"):
        perturbed = qnet.online[name].copy()
        original = qnet.online[name]

        def objective(theta):
            perturbed.assign(theta)
            qnet.online[name] = perturbed
            try:
                return td_loss(qnet, batch, targets, weights, 0.5, 0.05)[0]
            finally:
                qnet.online[name] = original

        assert check_gradient(objective, original.vector, grads[name]) < 1e-4


def test_double_q_target_stops_at_terminals():
    qnet = build_qnetwork(2, DDQNOptions(trunk_dim=4, head_dim=4, n_actions=3))
    next_states = np.eye(2)
    targets = double_q_target(qnet, np.array([1.0, 2.0]), next_states, np.array([True, False]), 0.9)
    assert targets[0] == 1.0
    greedy = np.argmax(q_values(qnet, next_states[1:]), axis=1)[0]
    assert targets[1] == pytest.approx(2.0 + 0.9 * q_values(qnet, next_states[1:], use_target=True)[0, greedy])


def test_replay_weights_are_normalised(rng):
    buffer = ReplayBuffer(one_step_transitions(repeats=2), alpha=0.6)
    buffer.update(np.array([0, 1]), np.array([5.0, 0.0]))
    assert buffer.priorities[1] == pytest.approx(1e-6)
    indices, weights, batch = buffer.sample(rng, 50, beta=0.5)
    assert batch.size == 50
    assert np.all(weights <= 1.0 + 1e-12)
    np.testing.assert_allclose(buffer.probabilities().sum(), 1.0)


def test_ddqn_learns_the_rewarded_action():
    options = DDQNOptions(trunk_dim=8, head_dim=8, n_actions=3, target_sync=50, log_every=100, penalty_weight=0.0)
    config = TrainingConfig(batch_size=16, epochs=None, steps=400, learning_rate=1e-2, seed=0)
    qnet = train_ddqn(one_step_transitions(), config, options)
    q = q_values(qnet, np.eye(2))
    np.testing.assert_allclose(q[:, 0], 1.0, atol=0.1)
    np.testing.assert_allclose(q[:, 1:], 0.0, atol=0.1)
    assert np.all(np.argmax(dqn_policy_table(qnet, np.eye(2)), axis=1) == 0)
    assert len(qnet.loss_log) == 4


def test_dqn_policy_is_a_softmax_of_advantages():
    qnet = build_qnetwork(2, DDQNOptions(trunk_dim=4, head_dim=4), seed=2)
    advantage = qnet.online["advantage"]
    state = np.array([0.3, -1.2])

    # zero weights leave the output bias as the advantage stream
    advantage.assign(np.zeros(advantage.size))
    np.testing.assert_allclose(dqn_policy(qnet, state).probs, 1.0 / N_ACTIONS)

    vector = np.zeros(advantage.size)
    vector[-N_ACTIONS + 7] = 10.0
    advantage.assign(vector)
    policy = dqn_policy(qnet, state)
    assert policy.probs[7] == pytest.approx(np.exp(10) / (np.exp(10) + 24))
    assert policy.probs[7] == pytest.approx(0.99891, abs=1e-5)
    assert policy.greedy_action == int(np.argmax(q_values(qnet, state)[0]))


def terminal_transitions(reward_table, repeats=20):
    """One-hot states, one terminal step per logged action, reward_table[state, action]"""
    reward_table = np.asarray(reward_table, dtype=float)
    n_states, n_actions = reward_table.shape
    states = np.repeat(np.eye(n_states), n_actions * repeats, axis=0)
    state_ids = np.repeat(np.arange(n_states), n_actions * repeats)
    actions = np.tile(np.arange(n_actions), n_states * repeats)
    return Transitions(
        states=states,
        actions=actions,
        rewards=reward_table[state_ids, actions],
        next_states=states.copy(),
        terminals=np.ones(len(actions), dtype=bool),
    )


def test_ddqn_penalty_bounds_q_values():
    rewards = np.array([[1.0, -1.0, 0.2], [-0.8, 0.9, 0.0]])
    options = DDQNOptions(trunk_dim=8, head_dim=8, n_actions=3, target_sync=100, log_every=1000,
                          penalty_weight=100.0, reward_max=0.5)
    config = TrainingConfig(batch_size=16, epochs=None, steps=3000, learning_rate=3e-3, seed=1)
    qnet = train_ddqn(terminal_transitions(rewards), config, options)
    q = q_values(qnet, np.eye(2))
    assert np.all(np.abs(q) <= 0.5 + 0.1)


def test_ddqn_on_zero_rewards_converges_to_zero():
    options = DDQNOptions(trunk_dim=8, head_dim=8, n_actions=3, target_sync=100, log_every=1000)
    config = TrainingConfig(batch_size=16, epochs=None, steps=2000, learning_rate=1e-3, seed=2)
    qnet = train_ddqn(terminal_transitions(np.zeros((2, 3))), config, options)
    assert np.max(np.abs(q_values(qnet, np.eye(2)))) < 0.05


CHAIN_LENGTH = 5
CHAIN_DISCOUNT = 0.9


def chain_step(state, action):
    """Action 1 moves right and pays 1 on leaving the last state; action 0 moves left at a cost of 0.5"""
    if action == 1:
        if state == CHAIN_LENGTH - 1:
            return state, 1.0, True
        return state + 1, 0.0, False
    return max(state - 1, 0), -0.5, False


def chain_optimal_q():
    q = np.zeros((CHAIN_LENGTH, 2))
    for _ in range(200):
        updated = np.zeros_like(q)
        for state in range(CHAIN_LENGTH):
            for action in range(2):
                successor, reward, terminal = chain_step(state, action)
                updated[state, action] = reward + (0.0 if terminal else CHAIN_DISCOUNT * q[successor].max())
        q = updated
    return q


def chain_transitions():
    rows = [(state, action, *chain_step(state, action)) for state in range(CHAIN_LENGTH) for action in range(2)]
    one_hot = np.eye(CHAIN_LENGTH)
    return Transitions(
        states=one_hot[[row[0] for row in rows]],
        actions=np.array([row[1] for row in rows]),
        rewards=np.array([row[3] for row in rows]),
        # terminal rows keep their own state as the successor
        next_states=one_hot[[row[2] for row in rows]],
        terminals=np.array([row[4] for row in rows]),
    )


@pytest.mark.slow
def test_ddqn_matches_value_iteration_on_a_chain():
    expected = chain_optimal_q()
    options = DDQNOptions(trunk_dim=32, head_dim=16, n_actions=2, target_sync=500, log_every=5000)
    config = TrainingConfig(batch_size=30, epochs=None, steps=20_000, learning_rate=1e-3,
                            discount=CHAIN_DISCOUNT, seed=0)
    qnet = train_ddqn(chain_transitions(), config, options)
    q = q_values(qnet, np.eye(CHAIN_LENGTH))
    np.testing.assert_array_equal(np.argmax(q, axis=1), np.argmax(expected, axis=1))
    assert np.max(np.abs(q - expected)) < 0.1


def test_ddqn_needs_steps():
    with pytest.raises(UsageError):
        train_ddqn(one_step_transitions(), TrainingConfig(epochs=None, steps=None))


def test_qnetwork_checkpoint(tmp_path):
    qnet = build_qnetwork(2, DDQNOptions(trunk_dim=4, head_dim=4, n_actions=3), seed=1)
    restored = load_qnetwork(save_qnetwork(tmp_path / "dqn.ckpt", qnet))
    assert restored.options == qnet.options
    np.testing.assert_array_equal(q_values(restored, np.eye(2)), q_values(qnet, np.eye(2)))
    np.testing.assert_array_equal(q_values(restored, np.eye(2), use_target=True), q_values(qnet, np.eye(2), use_target=True))


def test_policy_distribution_validation():
    with pytest.raises(UsageError):
        PolicyDistribution(np.array([0.5, 0.6]))
    assert PolicyDistribution.point_mass(4).greedy_action == 4
