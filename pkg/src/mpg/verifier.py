import logging
from dataclasses import dataclass, field

import numpy as np

from mpg.game import check_dimensions, mc_return
from mpg.lib import ConfigurationError, InfeasibleError, ordered_map

log = logging.getLogger(__name__)

# Relative gain above which a deviation counts as profitable in the report wording.
PROFIT_TOLERANCE = 1e-9


@dataclass
class AgentDeviation:
    agent: int
    baseline: float
    baseline_stderr: float
    best_value: float
    best_params: np.ndarray
    evaluations: int

    @property
    def gain(self):
        return self.best_value - self.baseline

    @property
    def relative_gain(self):
        scale = abs(self.baseline)
        return self.gain / scale if scale > 0.0 else self.gain

    def to_dict(self):
        payload = {
            "agent": self.agent,
            "baseline": self.baseline,
            "baseline_stderr": self.baseline_stderr,
            "best_value": self.best_value,
            "gain": self.gain,
            "relative_gain": self.relative_gain,
            "evaluations": self.evaluations,
        }
        if self.best_params.size <= 16:
            payload["best_params"] = self.best_params
        return payload


@dataclass
class NashReport:
    game: str
    agents: list = field(default_factory=list)
    budget: int = 0
    restarts: int = 0
    num_rollouts: int = 1

    @property
    def epsilon(self):
        """No agent improves by more than this."""
        return max((max(a.gain, 0.0) for a in self.agents), default=0.0)

    @property
    def epsilon_relative(self):
        return max((max(a.relative_gain, 0.0) for a in self.agents), default=0.0)

    @property
    def profitable(self):
        return self.epsilon_relative > PROFIT_TOLERANCE

    @property
    def statement(self):
        if self.profitable:
            return "profitable deviation found"
        return "no profitable deviation found"

    def to_dict(self):
        return {
            "game": self.game,
            "epsilon": self.epsilon,
            "epsilon_relative": self.epsilon_relative,
            "statement": self.statement,
            "budget": self.budget,
            "restarts": self.restarts,
            "num_rollouts": self.num_rollouts,
            "agents": [a.to_dict() for a in self.agents],
        }


class _DeviationSearch:
    """
    Agent k's own return as a function of its block, the other blocks held
    at w_star, counting evaluations against a budget. Every evaluation uses
    the same rollout seeds.
    """

    def __init__(self, game, policy, w_star, k, budget, num_rollouts, seed):
        self.game = game
        self.policy = policy
        self.w_star = w_star
        self.k = k
        self.budget = budget
        self.num_rollouts = num_rollouts
        self.seed = seed
        block = policy.param_slices[k]
        self.lower = policy.param_box.lower[block]
        self.upper = policy.param_box.upper[block]
        self.used = 0
        self.best_params = w_star[block].copy()
        self.best_value = -np.inf

    @property
    def remaining(self):
        return self.budget - self.used

    def spread(self, v):
        width = self.upper - self.lower
        return np.where(np.isfinite(width), width, np.maximum(1.0, np.abs(v)))

    def clip(self, v):
        return np.clip(v, self.lower, self.upper)

    def estimate(self, v):
        self.used += 1
        params = self.policy.with_block(self.w_star, self.k, v)
        return mc_return(self.game, self.policy, params, self.num_rollouts, self.seed)

    def value(self, v):
        value = float(self.estimate(v).mean[self.k])
        if value > self.best_value:
            self.best_value, self.best_params = value, np.array(v, dtype=float)
        return value

    def directions(self, size, rng, max_directions=8):
        if size <= max_directions:
            return np.eye(size)
        raw = rng.standard_normal((max_directions, size))
        return raw / np.linalg.norm(raw, axis=1, keepdims=True)

    def ascend(self, start, start_value, allowance, rng, step=1e-4):
        """Finite-difference gradient ascent with backtracking from start."""
        stop_at = self.used + allowance
        current, current_value = self.clip(start), start_value
        length = 0.1 * self.spread(current)
        while True:
            directions = self.directions(current.size, rng)
            if stop_at - self.used < 2 * len(directions) + 1:
                return
            grad = np.zeros(current.size)
            for u in directions:
                h = step * max(1.0, float(np.max(np.abs(current[u != 0.0]))))
                up = self.value(self.clip(current + h * u))
                down = self.value(self.clip(current - h * u))
                grad += (up - down) / (2.0 * h) * u
            scale = float(np.max(np.abs(grad)))
            if scale == 0.0:
                return
            direction = grad / scale
            trial, improved = length, False
            while stop_at - self.used > 0 and np.max(trial) > 1e-10:
                candidate = self.clip(current + trial * direction)
                candidate_value = self.value(candidate)
                if candidate_value > current_value:
                    current, current_value, improved = candidate, candidate_value, True
                    length = 2.0 * trial
                    break
                trial = 0.5 * trial
            if not improved:
                return

    def random_start(self, rng):
        center = self.w_star[self.policy.param_slices[self.k]]
        bounded = np.isfinite(self.lower) & np.isfinite(self.upper)
        uniform = rng.uniform(np.where(bounded, self.lower, 0.0), np.where(bounded, self.upper, 1.0))
        jitter = center + 0.1 * np.maximum(1.0, np.abs(center)) * rng.standard_normal(center.size)
        return self.clip(np.where(bounded, uniform, jitter))


def nash_deviation_check(game, policy, w_star, budget=200, seed=0, restarts=5, num_rollouts=20):
    """
    Search each agent's unilateral deviations from w_star.

    For agent k the other blocks stay at w_star while agent k's own return is
    maximized by gradient ascent from w_star and from random restarts inside
    the parameter box, within budget return evaluations. A positive gain
    certifies that w_star is not an equilibrium; finding none is evidence,
    not proof.

    :param num_rollouts: rollouts per evaluation; deterministic games use one.
    :raises:
        :class:`~mpg.lib.InfeasibleError` if w_star is outside the parameter
        box and :class:`~mpg.lib.ConfigurationError` for a non-positive budget.
    """
    w_star = np.asarray(w_star, dtype=float)
    check_dimensions(game, policy, w_star)
    if budget < 1:
        raise ConfigurationError("Deviation budget must be at least one evaluation per agent", key="budget")
    if restarts < 0:
        raise ConfigurationError("restarts must be non-negative", key="restarts")
    if not policy.param_box.contains(w_star):
        raise InfeasibleError(f"Candidate parameters lie outside the parameter box of the {policy.kind} policy")
    if not game.stochastic:
        num_rollouts = 1
    log.info(f"{game.name}: searching unilateral deviations, {budget} evaluations per agent")

    def search(k):
        rng = np.random.default_rng([seed, k])
        searcher = _DeviationSearch(game, policy, w_star, k, budget, num_rollouts, seed)
        block = policy.param_slices[k]
        baseline = searcher.estimate(w_star[block])
        base_value = float(baseline.mean[k])
        searcher.best_value = base_value
        allowance = searcher.remaining // (restarts + 1)
        searcher.ascend(w_star[block], base_value, allowance, rng)
        for _ in range(restarts):
            if searcher.remaining < 1:
                break
            start = searcher.random_start(rng)
            start_value = searcher.value(start)
            searcher.ascend(start, start_value, min(allowance, searcher.remaining), rng)
        deviation = AgentDeviation(
            agent=k,
            baseline=base_value,
            baseline_stderr=float(baseline.stderr[k]),
            best_value=searcher.best_value,
            best_params=searcher.best_params,
            evaluations=searcher.used,
        )
        log.debug(f"agent {k}: baseline {base_value:.6f}, best {deviation.best_value:.6f}, {searcher.used} evaluations")
        return deviation

    report = NashReport(
        game=game.name,
        agents=ordered_map(search, range(game.num_agents)),
        budget=budget,
        restarts=restarts,
        num_rollouts=num_rollouts,
    )
    log.info(f"{game.name}: {report.statement} (epsilon {report.epsilon:.3e}, relative {report.epsilon_relative:.3e})")
    return report
