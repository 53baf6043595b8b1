import logging
import unittest

import numpy as np
import pytest

from mpg.environments import make_cooperative, make_fishwar
from mpg.lib import ConfigurationError, InfeasibleError
from mpg.policy import LinearPolicy
from mpg.solver import fishwar_closed_form
from mpg.verifier import nash_deviation_check

log = logging.getLogger(__name__)

W_STAR = fishwar_closed_form(2, 0.5, 0.9)


def linear_policy(game):
    return LinearPolicy(game.policy_indices, game.action_dims, game.linear_gain_box)


class NashDeviationTests(unittest.TestCase):
    def setUp(self):
        self.game = make_fishwar()
        self.policy = linear_policy(self.game)

    def test_closed_form_is_an_equilibrium(self):
        report = nash_deviation_check(self.game, self.policy, W_STAR)
        assert report.epsilon_relative < 1e-3
        self.assertEqual(report.statement, "no profitable deviation found")
        self.assertEqual(report.num_rollouts, 1)
        self.assertAlmostEqual(report.agents[0].baseline, report.agents[1].baseline, places=12)

    def test_perturbed_profile_is_not(self):
        w = W_STAR + np.array([0.1, 0.0])
        report = nash_deviation_check(self.game, self.policy, w, budget=100, restarts=1)
        assert report.agents[0].gain > 0.0
        self.assertEqual(report.statement, "profitable deviation found")
        assert abs(report.agents[0].best_params[0] - W_STAR[0]) < 0.1

    def test_repeatable(self):
        first = nash_deviation_check(self.game, self.policy, W_STAR, budget=40, restarts=1, seed=4)
        second = nash_deviation_check(self.game, self.policy, W_STAR, budget=40, restarts=1, seed=4)
        self.assertEqual(first.to_dict()["agents"][1]["best_value"], second.to_dict()["agents"][1]["best_value"])

    def test_budget_is_respected(self):
        report = nash_deviation_check(self.game, self.policy, W_STAR, budget=30, restarts=2)
        assert all(agent.evaluations <= 30 for agent in report.agents)

    def test_outside_the_box(self):
        with pytest.raises(InfeasibleError) as excinfo:
            nash_deviation_check(self.game, self.policy, [1.5, 0.3])
        assert "outside the parameter box" in str(excinfo.value)

    def test_needs_a_budget(self):
        with pytest.raises(ConfigurationError) as excinfo:
            nash_deviation_check(self.game, self.policy, W_STAR, budget=0)
        assert "budget" in str(excinfo.value)

    def test_cooperative_optimum(self):
        game = make_cooperative(make_fishwar())
        report = nash_deviation_check(game, linear_policy(game), W_STAR, budget=100, restarts=2)
        assert report.epsilon_relative < 1e-6
