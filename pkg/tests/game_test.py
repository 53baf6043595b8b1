import dataclasses
import logging
import math
import unittest

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mpg.environments import FishWarParams, make_fishwar, make_mac
from mpg.game import (
    Box,
    check_dimensions,
    constraint_violations,
    evaluation_violations,
    mc_return,
    project_action,
    rollout,
    rollout_seed,
    truncation_horizon,
)
from mpg.lib import ConfigurationError, NumericalDomainError
from mpg.policy import LinearPolicy

log = logging.getLogger(__name__)

finite = st.floats(min_value=-1e6, max_value=1e6, allow_nan=False)


def fishwar_policy(game, gain=0.25):
    return LinearPolicy(game.policy_indices, game.action_dims, game.linear_gain_box, init=gain)


class BoxTests(unittest.TestCase):
    def test_inverted_bounds(self):
        with pytest.raises(ConfigurationError) as excinfo:
            Box([1.0], [0.0])
        assert "lower bound exceeds upper bound" in str(excinfo.value)

    def test_interior_leaves_unbounded_components(self):
        box = Box([0.0, -np.inf], [10.0, np.inf]).interior(0.1)
        np.testing.assert_allclose(box.lower, [1.0, -np.inf])
        np.testing.assert_allclose(box.upper, [9.0, np.inf])

    @given(st.lists(finite, min_size=3, max_size=3))
    def test_projection_is_idempotent(self, values):
        box = Box([0.0, -1.0, 2.0], [1.0, 1.0, 2.0])
        once = project_action(values, box)
        assert box.contains(once)
        np.testing.assert_array_equal(project_action(once, box), once)


class TruncationHorizonTests(unittest.TestCase):
    def test_tail_below_tolerance(self):
        horizon = truncation_horizon(0.9, 1e-4)
        self.assertEqual(horizon, 110)
        assert 0.9**horizon / 0.1 < 1e-4
        assert 0.9 ** (horizon - 1) / 0.1 >= 1e-4

    def test_myopic_game(self):
        self.assertEqual(truncation_horizon(0.0), 1)

    def test_discount_out_of_range(self):
        with pytest.raises(ConfigurationError) as excinfo:
            truncation_horizon(1.0)
        assert "discount must lie in [0, 1)" in str(excinfo.value)

    def test_fishwar_default_meets_the_bound(self):
        params = FishWarParams()
        assert params.horizon >= truncation_horizon(params.gamma)
        assert params.gamma**params.horizon / (1.0 - params.gamma) < 1e-4

    def test_short_fishwar_horizon_warns(self):
        with self.assertLogs("mpg.environments", level="WARNING") as logs:
            make_fishwar(FishWarParams(horizon=50))
        assert "truncation tail" in logs.output[0]


class RolloutTests(unittest.TestCase):
    def test_fishwar_first_transition(self):
        game = make_fishwar()
        trajectory = rollout(game, fishwar_policy(game), [0.25, 0.25], seed=0)
        self.assertAlmostEqual(trajectory.states[0][0], 1.0)
        self.assertAlmostEqual(trajectory.states[1][0], math.sqrt(0.5), places=12)
        self.assertEqual(trajectory.terminated_at, game.horizon)
        np.testing.assert_allclose(trajectory.rewards[:, 0], [math.log(0.25)] * 2)

    def test_same_seed_same_trajectory(self):
        game = make_mac()
        policy = LinearPolicy(game.policy_indices, game.action_dims, game.linear_gain_box, init=0.05)
        w = policy.initial_params(np.random.default_rng(0))
        first = rollout(game, policy, w, seed=7, stochastic=True)
        second = rollout(game, policy, w, seed=7, stochastic=True)
        other = rollout(game, policy, w, seed=8, stochastic=True)
        np.testing.assert_array_equal(first.states, second.states)
        np.testing.assert_array_equal(first.rewards, second.rewards)
        assert not np.array_equal(first.reward_noise, other.reward_noise)

    def test_mac_batteries_never_increase(self):
        game = make_mac()
        policy = LinearPolicy(game.policy_indices, game.action_dims, game.linear_gain_box, init=0.1)
        trajectory = rollout(game, policy, np.full(4, 0.1), seed=3, stochastic=True)
        assert np.all(np.diff(trajectory.states, axis=0) <= 0.0)
        self.assertEqual(constraint_violations(game, trajectory), [])

    def test_catch_quota_is_reported(self):
        def quota(x, a):
            return np.array([np.sum(a) - 0.5 * x[0]])

        game = dataclasses.replace(make_fishwar(), constraints=quota)
        policy = fishwar_policy(game)
        with self.assertLogs("mpg.game", level="WARNING"):
            self.assertEqual(evaluation_violations(game, policy, [0.3, 0.3], num_rollouts=2, base_seed=0), 400)
        self.assertEqual(evaluation_violations(game, policy, [0.2, 0.2], num_rollouts=2, base_seed=0), 0)
        self.assertEqual(evaluation_violations(make_fishwar(), policy, [0.3, 0.3], num_rollouts=2, base_seed=0), 0)

    def test_discounted_returns(self):
        game = make_fishwar()
        trajectory = rollout(game, fishwar_policy(game), [0.3, 0.2], seed=0)
        manual = sum(game.discount**i * trajectory.rewards[1, i] for i in range(trajectory.terminated_at))
        self.assertAlmostEqual(trajectory.discounted_returns(game.discount)[1], manual, places=10)

    def test_non_finite_transition(self):
        game = dataclasses.replace(make_fishwar(), transition=lambda x, a, theta: np.array([np.nan]))
        with pytest.raises(NumericalDomainError) as excinfo:
            rollout(game, fishwar_policy(game), [0.25, 0.25], seed=0)
        assert "non-finite state" in str(excinfo.value)
        self.assertEqual(excinfo.value.step, 0)

    def test_dimension_mismatch(self):
        game = make_fishwar()
        policy = LinearPolicy(((0,),) * 3, (1, 1, 1))
        with pytest.raises(ConfigurationError) as excinfo:
            check_dimensions(game, policy)
        assert "do not match game" in str(excinfo.value)

    def test_wrong_parameter_length(self):
        game = make_fishwar()
        with pytest.raises(ConfigurationError) as excinfo:
            rollout(game, fishwar_policy(game), [0.25, 0.25, 0.25], seed=0)
        assert "policy expects 2" in str(excinfo.value)


class MonteCarloTests(unittest.TestCase):
    def test_deterministic_game_has_no_spread(self):
        game = make_fishwar()
        estimate = mc_return(game, fishwar_policy(game), [0.3, 0.3], num_rollouts=3, base_seed=0)
        np.testing.assert_array_equal(estimate.stderr, [0.0, 0.0])

    def test_stochastic_game_is_reproducible(self):
        game = make_mac()
        policy = LinearPolicy(game.policy_indices, game.action_dims, game.linear_gain_box)
        w = np.full(4, 0.05)
        first = mc_return(game, policy, w, num_rollouts=5, base_seed=11)
        second = mc_return(game, policy, w, num_rollouts=5, base_seed=11)
        np.testing.assert_array_equal(first.mean, second.mean)
        assert np.all(first.stderr > 0.0)

    def test_needs_a_rollout(self):
        game = make_fishwar()
        with pytest.raises(ConfigurationError):
            mc_return(game, fishwar_policy(game), [0.3, 0.3], num_rollouts=0, base_seed=0)

    def test_rollout_seeds(self):
        self.assertEqual(rollout_seed(11, 3), 14)
        self.assertEqual(rollout_seed((11, 2), 3), [11, 2, 3])
