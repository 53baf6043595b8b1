import csv
import logging
import math
import os
import unittest
from tempfile import mkdtemp

import numpy as np
import pytest

from mpg.environments import make_cooperative, make_fishwar, make_mac, make_non_mpg_counterexample
from mpg.lib import ConfigurationError, PathError
from mpg.numdiff import FdConfig
from mpg.policy import LinearPolicy
from mpg.potential import (
    declared_potential,
    definition_gap,
    export_grid_csv,
    max_deviation_up_to_constant,
    potential_consistency_check,
    potential_grid,
    potential_line_integral,
)

log = logging.getLogger(__name__)

BASE = (np.array([1.0]), np.array([1.0, 1.0]))


def linear_policy(game):
    return LinearPolicy(game.policy_indices, game.action_dims, game.linear_gain_box)


class LineIntegralTests(unittest.TestCase):
    def setUp(self):
        self.game = make_fishwar()
        self.policy = linear_policy(self.game)

    def integral(self, x, w, waypoints=None, base=BASE):
        return potential_line_integral(self.game, self.policy, [x], w, base, quadrature=256, waypoints=waypoints)

    def test_fishwar_grid_matches_closed_form(self):
        values, reference = [], []
        for x in np.linspace(0.6, 1.0, 5):
            for w in np.linspace(0.3, 0.9, 5):
                gains = np.array([w, 1.2 - w])
                values.append(self.integral(x, gains))
                reference.append(math.log(x) + np.log(gains).sum())
        assert max_deviation_up_to_constant(values, reference) < 1e-5

    def test_zero_length_path(self):
        self.assertEqual(self.integral(1.0, [1.0, 1.0]), 0.0)

    def test_path_independence(self):
        target = ([0.6], [0.4, 0.8])
        first = self.integral(*target, waypoints=[([0.8], [1.0, 0.6])])
        second = self.integral(*target, waypoints=[([1.0], [0.4, 1.0])])
        self.assertAlmostEqual(first, second, delta=1e-5)
        self.assertAlmostEqual(first, math.log(0.6) + math.log(0.4) + math.log(0.8), delta=1e-5)

    def test_path_independence_on_a_cooperative_game(self):
        game = make_cooperative(make_fishwar())
        policy = linear_policy(game)
        target = ([0.6], [0.4, 0.8])
        first, second = (
            potential_line_integral(game, policy, *target, BASE, quadrature=256, waypoints=[waypoint])
            for waypoint in (([0.8], [1.0, 0.6]), ([1.0], [0.4, 1.0]))
        )
        self.assertAlmostEqual(first, second, delta=1e-5)

    def test_additive_along_a_chain(self):
        b = (np.array([0.8]), np.array([0.5, 0.7]))
        c = (np.array([0.6]), np.array([0.3, 0.9]))
        ab = self.integral(b[0][0], b[1])
        bc = potential_line_integral(self.game, self.policy, c[0], c[1], b)
        ac = self.integral(c[0][0], c[1])
        self.assertAlmostEqual(ab + bc, ac, delta=2e-5)

    def test_path_leaving_the_box(self):
        with pytest.raises(PathError) as excinfo:
            self.integral(0.5, [0.5, 0.5], waypoints=[([1.5], [0.5, 0.5])])
        assert "leaves the state x parameter box" in str(excinfo.value)
        assert 0.0 < excinfo.value.location < 1.0

    def test_needs_a_panel(self):
        with pytest.raises(ConfigurationError):
            potential_line_integral(self.game, self.policy, [0.5], [0.5, 0.5], BASE, quadrature=0)


class DeclaredPotentialTests(unittest.TestCase):
    def test_fishwar_value(self):
        game = make_fishwar()
        potential = declared_potential(game, linear_policy(game))
        self.assertAlmostEqual(potential.value([1.0], [0.5, 0.5]), -1.38629, places=5)

    def test_mac_silent_channel(self):
        game = make_mac()
        potential = declared_potential(game)
        x = np.array([10.0, 7.0, 3.0, 0.5])
        self.assertAlmostEqual(float(potential.term(x, np.zeros(4), np.full(4, 0.9))), 0.1 * x.sum(), places=12)

    def test_offset(self):
        game = make_fishwar()
        shifted = declared_potential(game, linear_policy(game), offset=10.0)
        plain = declared_potential(game, linear_policy(game))
        self.assertAlmostEqual(shifted.value([0.7], [0.2, 0.3]) - plain.value([0.7], [0.2, 0.3]), 10.0)

    def test_needs_a_decomposition(self):
        with pytest.raises(ConfigurationError) as excinfo:
            declared_potential(make_non_mpg_counterexample())
        assert "declares no common reward term" in str(excinfo.value)


class ConsistencyTests(unittest.TestCase):
    def test_fishwar(self):
        game = make_fishwar()
        policy = linear_policy(game)
        result = potential_consistency_check(game, policy, declared_potential(game, policy))
        assert result["state"] < 1e-6
        assert result["params"] < 1e-6
        self.assertEqual(result["points_skipped"], 0)

    def test_mac(self):
        game = make_mac()
        policy = linear_policy(game)
        cfg = FdConfig(num_points=8)
        result = potential_consistency_check(game, policy, declared_potential(game, policy, cfg=cfg), cfg)
        assert result["state"] < 1e-3
        assert result["params"] < 1e-3

    def test_cooperative_game_is_exact(self):
        game = make_cooperative(make_fishwar())
        policy = linear_policy(game)
        cfg = FdConfig(num_points=8)
        result = potential_consistency_check(game, policy, declared_potential(game, policy, cfg=cfg), cfg)
        assert result["state"] < 1e-8
        assert result["params"] < 1e-8


class DefinitionGapTests(unittest.TestCase):
    def test_fishwar(self):
        game = make_fishwar()
        policy = linear_policy(game)
        gap = definition_gap(game, policy, declared_potential(game, policy), [0.3, 0.3])
        assert gap["max_gap"] < 1e-9
        self.assertEqual(len(gap["per_agent"]), 2)

    def test_mac(self):
        game = make_mac()
        policy = linear_policy(game)
        gap = definition_gap(game, policy, declared_potential(game, policy), np.full(4, 0.0125), num_rollouts=5)
        assert gap["max_gap"] < 1e-8


class GridTests(unittest.TestCase):
    def test_grid_export(self):
        game = make_fishwar()
        policy = linear_policy(game)
        declared = declared_potential(game, policy)
        targets = [([0.8], [0.5, 0.5]), ([0.6], [0.3, 0.7])]
        rows = potential_grid(game, policy, BASE, targets, quadrature=256, declared=declared)
        for row in rows:
            self.assertAlmostEqual(row["line_integral"], row["declared"], delta=1e-4)

        path = os.path.join(mkdtemp(), "grid.csv")
        export_grid_csv(path, rows)
        with open(path, newline="", encoding="utf-8") as fh:
            loaded = list(csv.DictReader(fh))
        self.assertEqual(len(loaded), 2)
        self.assertEqual(list(loaded[0]), ["point", "x_0", "w_0", "w_1", "line_integral", "declared"])
        self.assertAlmostEqual(float(loaded[1]["x_0"]), 0.6)
