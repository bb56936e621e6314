from dataclasses import replace

import numpy as np
import pytest

from app.core.exceptions import ConfigurationError, UsageError
from app.services.cohort_sim import (
    NON_SURVIVOR,
    default_sim_mdp,
    discounted_returns,
    exact_policy_value,
    exact_value_functions,
    generate_cohort,
    ground_truth_payload,
    mortality_probability,
)
from app.utils.features import N_ACTIONS, N_FEATURES


def test_cohort_is_reproducible(sim_mdp):
    first = generate_cohort(sim_mdp, 12, seed=5)
    second = generate_cohort(sim_mdp, 12, seed=5, workers=4)
    for a, b in zip(first, second):
        assert a.patient_id == b.patient_id
        np.testing.assert_array_equal(a.observations, b.observations)
        np.testing.assert_array_equal(a.iv_doses, b.iv_doses)
        assert a.outcome == b.outcome

    other = generate_cohort(sim_mdp, 12, seed=6)
    assert any(not np.array_equal(a.observations, b.observations) for a, b in zip(first, other))


def test_trajectory_layout(raw_cohort, sim_mdp):
    for trajectory in raw_cohort:
        assert 1 <= trajectory.length <= sim_mdp.horizon_max
        assert trajectory.observations.shape == (trajectory.length, N_FEATURES)
        assert len(trajectory.latent_trace) == trajectory.length + 1
        assert len(trajectory.intended_actions) == trajectory.length
        assert np.all(trajectory.iv_doses >= 0) and np.all(trajectory.vaso_doses >= 0)
        # zero dose exactly when the bin is zero
        iv_bins, vaso_bins = np.divmod(trajectory.intended_actions, 5)
        np.testing.assert_array_equal(trajectory.iv_doses == 0, iv_bins == 0)
        np.testing.assert_array_equal(trajectory.vaso_doses == 0, vaso_bins == 0)
        # absorbing states only at the end
        assert not np.any(sim_mdp.absorbing[trajectory.latent_trace[:-1]])
        if trajectory.latent_trace[-1] == sim_mdp.death_state:
            assert trajectory.outcome == NON_SURVIVOR


def test_invalid_transition_rows_are_rejected(sim_mdp):
    broken = np.array(sim_mdp.transition_tensor)
    broken[0, 3, 0] += 0.1
    with pytest.raises(ConfigurationError) as excinfo:
        replace(sim_mdp, transition_tensor=broken)
    assert excinfo.value.field == "transition_tensor"
    assert "[0,3]" in str(excinfo.value)


def test_initial_mass_on_absorbing_state_is_rejected(sim_mdp):
    initial = np.zeros(sim_mdp.latent_state_count)
    initial[sim_mdp.death_state] = 1.0
    with pytest.raises(ConfigurationError):
        replace(sim_mdp, initial_distribution=initial)


def test_generate_cohort_preconditions(sim_mdp):
    with pytest.raises(UsageError):
        generate_cohort(sim_mdp, 0, seed=0)
    with pytest.raises(UsageError):
        generate_cohort(replace(sim_mdp, horizon_max=None), 3, seed=0)


def test_value_functions_satisfy_bellman_equations(sim_mdp):
    policy = sim_mdp.behavior_policy_table
    values = exact_value_functions(sim_mdp, policy)
    horizon = sim_mdp.horizon_max
    gamma = sim_mdp.discount
    live = ~sim_mdp.absorbing

    for s in range(sim_mdp.latent_state_count):
        assert values.state_value(horizon, s) == 0.0
    for t in range(horizon):
        next_values = np.array([values.state_value(t + 1, s) for s in range(sim_mdp.latent_state_count)])
        for s in np.flatnonzero(live):
            q = np.array([values.action_value(t, s, a) for a in range(N_ACTIONS)])
            expected = sim_mdp.reward_table[s] + gamma * sim_mdp.transition_tensor[s] @ (next_values * live)
            np.testing.assert_allclose(q, expected, atol=1e-12)
            assert values.state_value(t, s) == pytest.approx(policy[s] @ q, abs=1e-12)
        for s in np.flatnonzero(~live):
            assert values.state_value(t, s) == 0.0


def test_infinite_horizon_reaches_fixed_point():
    mdp = replace(default_sim_mdp(), horizon_max=None, discount=0.9)
    values = exact_value_functions(mdp, mdp.behavior_policy_table)
    v = values.state_values[0]
    live = ~mdp.absorbing
    backup = np.einsum("sa,sa->s", mdp.behavior_policy_table,
                       mdp.reward_table + 0.9 * mdp.transition_tensor @ (v * live))
    np.testing.assert_allclose(v[live], backup[live], atol=1e-10)
    assert values.sweeps > 1


def test_exact_value_matches_monte_carlo(sim_mdp):
    cohort = generate_cohort(sim_mdp, 4000, seed=11, workers=4)
    returns = discounted_returns(cohort, sim_mdp.discount)
    exact = exact_policy_value(sim_mdp, sim_mdp.behavior_policy_table)
    assert abs(returns.mean() - exact) < 5 * returns.std() / np.sqrt(len(returns)) + 1e-9

    died = np.array([trajectory.outcome for trajectory in cohort], dtype=float)
    mortality = mortality_probability(sim_mdp)
    assert 0.0 < mortality < 1.0
    assert abs(died.mean() - mortality) < 5 * np.sqrt(mortality * (1 - mortality) / len(died))


def test_target_policy_changes_the_cohort(sim_mdp):
    always_zero = np.zeros((sim_mdp.latent_state_count, N_ACTIONS))
    always_zero[:, 0] = 1.0
    cohort = generate_cohort(sim_mdp, 20, seed=1, policy_table=always_zero)
    assert all(np.all(trajectory.intended_actions == 0) for trajectory in cohort)
    assert all(np.all(trajectory.iv_doses == 0) for trajectory in cohort)


def test_discounted_returns_needs_simulator_rewards(raw_cohort):
    stripped = replace(raw_cohort[0], sim_rewards=None)
    with pytest.raises(UsageError):
        discounted_returns([stripped], 0.99)


def test_ground_truth_payload(sim_mdp, raw_cohort):
    payload = ground_truth_payload(sim_mdp, raw_cohort, seed=3)
    assert payload["seed"] == 3
    assert payload["horizon_max"] == sim_mdp.horizon_max
    assert set(payload["patients"]) == {trajectory.patient_id for trajectory in raw_cohort}
    assert payload["exact_behavior_value"] == pytest.approx(exact_policy_value(sim_mdp, sim_mdp.behavior_policy_table))
