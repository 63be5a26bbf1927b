import math

import numpy as np
import pytest

from lowrank_marl.generation import normalize_transition
from lowrank_marl.mdp import (
    TabularMDP,
    evaluate_policy,
    expected_return,
    iter_policy_improvement,
    load_mdp,
    optimal_policy,
    policy_improvement,
    random_policy,
    save_mdp,
    step,
)

from oracles import enumerate_optimal_values, policy_value_iteration, value_iteration


def random_mdp(seed, n_states=4, action_sizes=(2, 2), discount=0.9):
    rng = np.random.default_rng(seed)
    T = normalize_transition(rng.random((n_states,) + action_sizes + (n_states,)))
    R = rng.standard_normal((n_states,) + action_sizes)
    return TabularMDP(T, R, discount)


def two_state_mdp():
    T = np.array([[[0.8, 0.2], [0.1, 0.9]],
                  [[0.5, 0.5], [0.0, 1.0]]])
    R = np.array([[1.0, 0.0], [0.0, 2.0]])
    return TabularMDP(T, R, 0.9)


class TestConstruction:
    def test_rejects_unnormalized(self):
        T = np.full((2, 2, 2), 0.4)
        with pytest.raises(ValueError, match="sum to 1"):
            TabularMDP(T, np.zeros((2, 2)))

    def test_clamps_tiny_negatives(self):
        T = np.array([[[1.0 + 1e-13, -1e-13]], [[0.5, 0.5]]])
        mdp = TabularMDP(T, np.zeros((2, 1)))
        assert mdp.transition.min() == 0.0

    def test_rejects_negative(self):
        T = np.array([[[1.1, -0.1]], [[0.5, 0.5]]])
        with pytest.raises(ValueError, match="negative"):
            TabularMDP(T, np.zeros((2, 1)))

    def test_rejects_shape_and_discount(self):
        T = np.full((2, 3, 2), 0.5)
        with pytest.raises(ValueError):
            TabularMDP(T, np.zeros((2, 2)))
        with pytest.raises(ValueError):
            TabularMDP(T, np.zeros((2, 3)), discount=1.0)

    def test_joint_action_indexing(self):
        mdp = random_mdp(0, 3, (2, 3, 4))
        assert mdp.n_joint_actions == 24 and mdp.n_state_actions == 72
        assert mdp.joint_index((1, 2, 3)) == 23
        assert mdp.joint_action(23) == (1, 2, 3)
        np.testing.assert_array_equal(mdp.P[1, 23], mdp.transition[1, 1, 2, 3])


class TestStep:
    def test_deterministic_slice(self):
        T = np.zeros((5, 1, 5))
        T[:, 0, 3] = 1.0
        mdp = TabularMDP(T, np.arange(5.0).reshape(5, 1))
        rng = np.random.default_rng(0)
        assert all(step(mdp, s, 0, rng) == (3, float(s)) for s in range(5) for _ in range(20))

    def test_uniform_frequencies(self):
        mdp = TabularMDP(np.full((20, 1, 20), 0.05), np.zeros((20, 1)))
        rng = np.random.default_rng(1)
        counts = np.bincount([step(mdp, 0, 0, rng)[0] for _ in range(100_000)], minlength=20)
        assert np.max(np.abs(counts / 1e5 - 0.05)) < 0.01

    def test_reward_lookup_exact(self):
        mdp = random_mdp(2, 3, (2, 3))
        assert step(mdp, 2, (1, 2), np.random.default_rng(0))[1] == mdp.reward[2, 1, 2]

    def test_out_of_range(self):
        mdp = random_mdp(3)
        with pytest.raises(IndexError):
            step(mdp, 9, 0, np.random.default_rng(0))
        with pytest.raises(IndexError):
            step(mdp, 0, 4, np.random.default_rng(0))


class TestEvaluation:
    def test_myopic(self):
        mdp = random_mdp(4, discount=0.0)
        pi = random_policy(mdp, 0)
        _, V = evaluate_policy(mdp, pi)
        np.testing.assert_allclose(V, mdp.R[np.arange(4), pi], atol=1e-15)

    def test_geometric_series(self):
        mdp = TabularMDP(np.ones((1, 1, 1)), np.ones((1, 1)), 0.9)
        _, V = evaluate_policy(mdp, np.array([0]))
        assert V[0] == pytest.approx(10.0, abs=1e-12)

    def test_two_state_against_value_iteration(self):
        mdp = two_state_mdp()
        for pi in ([0, 0], [0, 1], [1, 0], [1, 1]):
            pi = np.array(pi)
            Q, V = evaluate_policy(mdp, pi)
            np.testing.assert_allclose(V, policy_value_iteration(mdp, pi), atol=1e-12)
            np.testing.assert_allclose(Q[[0, 1], pi], V, atol=1e-9)

    def test_invalid_policy(self):
        mdp = random_mdp(5)
        with pytest.raises(ValueError):
            evaluate_policy(mdp, np.array([0, 1, 2, 4]))
        with pytest.raises(ValueError):
            evaluate_policy(mdp, np.zeros(4))


class TestImprovement:
    def test_optimal_start_is_fixed_point(self):
        mdp = random_mdp(6)
        pi, _ = optimal_policy(mdp)
        np.testing.assert_array_equal(policy_improvement(mdp, pi), pi)

    def test_two_state_enumeration(self):
        mdp = two_state_mdp()
        pi = policy_improvement(mdp, np.array([0, 0]))
        np.testing.assert_allclose(evaluate_policy(mdp, pi)[1], enumerate_optimal_values(mdp), atol=1e-10)

    def test_four_state_two_agents_enumeration(self):
        mdp = random_mdp(7, 4, (2, 2))
        pi, _ = optimal_policy(mdp, seed=7)
        np.testing.assert_allclose(evaluate_policy(mdp, pi)[1], enumerate_optimal_values(mdp), atol=1e-8)

    def test_matches_value_iteration(self):
        mdp = random_mdp(8, 6, (3, 2))
        pi, _ = optimal_policy(mdp)
        np.testing.assert_allclose(evaluate_policy(mdp, pi)[1], value_iteration(mdp), atol=1e-9)

    def test_cap_zero_returns_input(self):
        mdp = random_mdp(9)
        pi = random_policy(mdp, 1)
        np.testing.assert_array_equal(policy_improvement(mdp, pi, 0), pi)

    def test_step_count_bound_and_monotone(self):
        mdp = random_mdp(10, 5, (3, 3))
        steps = list(iter_policy_improvement(mdp, random_policy(mdp, 0)))
        assert len(steps) - 1 <= mdp.n_state_actions
        for (_, _, v0), (_, _, v1) in zip(steps, steps[1:]):
            assert np.all(v1 >= v0 - 1e-9)
        _, Q, V = steps[-1]
        assert np.all(V >= Q.max(axis=1) - 1e-9)

    def test_ties_go_to_lowest_index(self):
        mdp = TabularMDP(np.ones((1, 3, 1)), np.array([[0.0, 1.0, 1.0]]), 0.5)
        np.testing.assert_array_equal(policy_improvement(mdp, np.array([0])), [1])


class TestOptimalPolicy:
    def test_single_state_argmax(self):
        R = np.array([[[0.3, 0.9], [0.1, -1.0]]])
        mdp = TabularMDP(np.ones((1, 2, 2, 1)), R, 0.9)
        pi, ret = optimal_policy(mdp)
        assert mdp.joint_action(pi[0]) == (0, 1)
        assert ret == pytest.approx(0.9 / 0.1)

    def test_idempotent(self):
        mdp = random_mdp(11)
        (pa, ra), (pb, rb) = optimal_policy(mdp, 3), optimal_policy(mdp, 3)
        np.testing.assert_allclose(evaluate_policy(mdp, pa)[1], evaluate_policy(mdp, pb)[1], atol=1e-9)
        assert ra == rb

    def test_return_is_start_weighted_value(self):
        mdp = random_mdp(12)
        pi, ret = optimal_policy(mdp)
        assert ret == pytest.approx(float(np.mean(evaluate_policy(mdp, pi)[1])))
        assert expected_return(mdp, pi) == ret


def test_serialization_round_trip(tmp_path):
    mdp = random_mdp(13, 3, (2, 2), discount=0.8)
    mdp.metadata["seed"] = 13
    save_mdp(tmp_path / "m", mdp)
    assert {p.name for p in (tmp_path / "m").iterdir()} == {"transition.txt", "reward.txt", "metadata.json"}
    back = load_mdp(tmp_path / "m")
    np.testing.assert_array_equal(back.transition, mdp.transition)
    np.testing.assert_array_equal(back.reward, mdp.reward)
    assert back.discount == 0.8 and back.metadata["seed"] == 13
    assert back.action_sizes == (2, 2) and math.isclose(back.initial_distribution.sum(), 1.0)
