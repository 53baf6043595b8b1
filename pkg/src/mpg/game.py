import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Tuple

import numpy as np

from mpg.lib import ConfigurationError, NumericalDomainError, ordered_map

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Box:
    """
    Componentwise bounds. Infinite bounds are allowed.
    """

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lower = np.atleast_1d(np.asarray(self.lower, dtype=float))
        upper = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lower.shape != upper.shape:
            raise ConfigurationError(f"Box bounds differ in shape: {lower.shape} vs {upper.shape}")
        if np.any(lower > upper):
            raise ConfigurationError(f"Box lower bound exceeds upper bound: {lower} > {upper}")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @classmethod
    def uniform(cls, lower, upper, size):
        return cls(np.full(size, lower, dtype=float), np.full(size, upper, dtype=float))

    @classmethod
    def unbounded(cls, size):
        return cls.uniform(-np.inf, np.inf, size)

    @property
    def size(self):
        return self.lower.size

    @property
    def width(self):
        return self.upper - self.lower

    @property
    def bounded(self):
        return np.isfinite(self.lower) & np.isfinite(self.upper)

    def contains(self, value, atol=0.0):
        value = np.asarray(value, dtype=float)
        return bool(np.all(value >= self.lower - atol) and np.all(value <= self.upper + atol))

    def clip(self, value):
        return np.clip(value, self.lower, self.upper)

    def interior(self, margin):
        """Shrink every bounded component by margin * width on both sides."""
        shrink = np.where(self.bounded, margin * np.nan_to_num(self.width, posinf=0.0), 0.0)
        return Box(self.lower + shrink, self.upper - shrink)


@dataclass(frozen=True)
class Noise:
    """
    One draw of the exogenous randomness of a step.

    ``reward`` holds the reward noise of all agents jointly, ``transition``
    the transition noise.
    """

    reward: np.ndarray
    transition: np.ndarray


class DeterministicNoise:
    """Noise model of games without randomness."""

    stochastic = False

    def sample(self, rng, x, a):
        return Noise(np.zeros(0), np.zeros(0))


@dataclass(frozen=True)
class Decomposition:
    """
    Declared split r_k = J + Theta_k of every agent's reward.

    ``common(x, a, sigma)`` and ``non_common(k, x, a, sigma)`` broadcast over
    leading axes like the game's reward evaluator. ``policy_indices[k]`` are
    the state components agent k's policy reads, ``reward_indices[k]`` the
    ones its reward reads directly.
    """

    common: Callable
    non_common: Callable
    policy_indices: Tuple[Tuple[int, ...], ...]
    reward_indices: Tuple[Tuple[int, ...], ...]

    def theta_indices(self, k):
        return tuple(sorted(set(self.policy_indices[k]) | set(self.reward_indices[k])))


@dataclass(frozen=True)
class GameSpec:
    """
    A discounted stochastic game with continuous states and actions.

    ``reward(k, x, a, sigma)``, ``transition(x, a, theta)`` and
    ``constraints(x, a)`` are pure functions. Rewards and the declared
    decomposition broadcast over leading axes of x, a and sigma.
    """

    name: str
    num_agents: int
    state_dim: int
    action_dims: Tuple[int, ...]
    discount: float
    horizon: int
    reward: Callable
    transition: Callable
    state_box: Box
    initial_state: object
    action_bounds: Callable
    policy_indices: Tuple[Tuple[int, ...], ...]
    constraints: Optional[Callable] = None
    noise_model: object = field(default_factory=DeterministicNoise)
    decomposition: Optional[Decomposition] = None
    is_terminal: Callable = lambda x: False
    linear_gain_box: Tuple[float, float] = (-math.inf, math.inf)
    params: object = None

    def __post_init__(self):
        object.__setattr__(self, "action_dims", tuple(int(d) for d in self.action_dims))
        if self.num_agents < 1:
            raise ConfigurationError(f"{self.name}: num_agents must be positive", key="num_agents")
        if self.state_dim < 1:
            raise ConfigurationError(f"{self.name}: state_dim must be positive", key="state_dim")
        if len(self.action_dims) != self.num_agents or min(self.action_dims) < 1:
            raise ConfigurationError(
                f"{self.name}: need one positive action dimension per agent, got {self.action_dims}",
                key="action_dims",
            )
        if not 0.0 <= self.discount < 1.0:
            raise ConfigurationError(f"{self.name}: discount must lie in [0, 1)", key="discount")
        if self.horizon < 1:
            raise ConfigurationError(f"{self.name}: horizon must be positive", key="horizon")
        if self.state_box.size != self.state_dim:
            raise ConfigurationError(f"{self.name}: state_box has {self.state_box.size} components", key="state_box")
        if len(self.policy_indices) != self.num_agents:
            raise ConfigurationError(f"{self.name}: one policy index set per agent required", key="policy_indices")

    @property
    def action_dim(self):
        return sum(self.action_dims)

    @property
    def action_slices(self):
        edges = np.cumsum((0,) + self.action_dims)
        return [slice(int(lo), int(hi)) for lo, hi in zip(edges[:-1], edges[1:])]

    @property
    def stochastic(self):
        return bool(getattr(self.noise_model, "stochastic", False))

    def sample_initial(self, rng):
        if callable(self.initial_state):
            x0 = self.initial_state(rng)
        else:
            x0 = self.initial_state
        return np.array(x0, dtype=float).reshape(self.state_dim)

    def rewards(self, x, a, sigma):
        return np.array([self.reward(k, x, a, sigma) for k in range(self.num_agents)], dtype=float)


@dataclass
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    reward_noise: np.ndarray
    transition_noise: np.ndarray
    terminated_at: int
    seed: int
    samples: Optional[np.ndarray] = None

    def discounted_returns(self, gamma):
        """Per-agent sum of gamma^i r_{k,i}."""
        discounts = gamma ** np.arange(self.terminated_at)
        return self.rewards @ discounts


@dataclass(frozen=True)
class MonteCarloEstimate:
    mean: np.ndarray
    stderr: np.ndarray
    num_rollouts: int


def project_action(a, box):
    """Clamp a joint action into the action box."""
    return np.clip(np.asarray(a, dtype=float), box.lower, box.upper)


def truncation_horizon(gamma, tol=1e-4):
    """
    Smallest T such that gamma^T / (1 - gamma) < tol, i.e. the tail of a
    discounted sum of rewards bounded by R is below tol * R.
    """
    if not 0.0 <= gamma < 1.0:
        raise ConfigurationError(f"discount must lie in [0, 1), got {gamma}", key="discount")
    if gamma == 0.0:
        return 1
    horizon = math.ceil(math.log(tol * (1.0 - gamma)) / math.log(gamma))
    while gamma**horizon / (1.0 - gamma) >= tol:
        horizon += 1
    return max(1, horizon)


def check_dimensions(game, policy, w=None):
    if tuple(policy.action_dims) != tuple(game.action_dims):
        raise ConfigurationError(
            f"Policy action dimensions {policy.action_dims} do not match game {game.action_dims}",
            key="action_dims",
        )
    for k, indices in enumerate(policy.state_indices):
        if any(m < 0 or m >= game.state_dim for m in indices):
            raise ConfigurationError(f"Policy of agent {k} reads state components {indices} outside the state")
    if w is not None and np.size(w) != policy.num_params:
        raise ConfigurationError(
            f"Parameter vector has {np.size(w)} components, policy expects {policy.num_params}", key="w"
        )


def rollout_seed(base_seed, index):
    """
    Seed of the index-th rollout: base_seed + index for an integer base, the
    entropy list [*base_seed, index] for a stream key such as (seed, purpose).
    """
    if np.ndim(base_seed) == 0:
        return int(base_seed) + int(index)
    return [int(v) for v in base_seed] + [int(index)]


def split_seeds(seed):
    """Independent environment and exploration generators derived from one seed."""
    env_seq, explore_seq = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(env_seq), np.random.default_rng(explore_seq)


def _stack(draws):
    width = np.size(draws[0])
    return np.array(draws, dtype=float).reshape(len(draws), width)


def rollout(game, policy, w, seed, stochastic=False, exploration_std=None):
    """
    Simulate one episode of the game under the parametric policy.

    :param stochastic:
        Add Gaussian exploration with ``exploration_std`` (defaults to the
        policy's own) to the action mean before projecting it.
    :returns:
        A :class:`Trajectory`; the same seed always reproduces it.
    :raises:
        :class:`~mpg.lib.ConfigurationError` on dimension mismatch and
        :class:`~mpg.lib.NumericalDomainError` when the transition leaves
        the reals.
    """
    w = np.asarray(w, dtype=float)
    check_dimensions(game, policy, w)
    env_rng, explore_rng = split_seeds(seed)
    if stochastic:
        std = np.broadcast_to(
            np.asarray(policy.exploration_std if exploration_std is None else exploration_std, dtype=float),
            (game.action_dim,),
        )

    x = game.sample_initial(env_rng)
    states = [x]
    actions, rewards, reward_noise, transition_noise, samples = [], [], [], [], []
    terminated_at = game.horizon
    for i in range(game.horizon):
        mean = policy.forward(x, w)
        if stochastic:
            sample = mean + std * explore_rng.standard_normal(game.action_dim)
            samples.append(sample)
        else:
            sample = mean
        a = project_action(sample, game.action_bounds(x))
        noise = game.noise_model.sample(env_rng, x, a)
        rewards.append(game.rewards(x, a, noise.reward))
        x_next = np.asarray(game.transition(x, a, noise.transition), dtype=float)
        if not np.all(np.isfinite(x_next)):
            raise NumericalDomainError(f"{game.name}: non-finite state {x_next} after step {i}", step=i)
        x = game.state_box.clip(x_next)
        states.append(x)
        actions.append(a)
        reward_noise.append(noise.reward)
        transition_noise.append(noise.transition)
        if game.is_terminal(x):
            terminated_at = i + 1
            break

    return Trajectory(
        states=np.array(states),
        actions=np.array(actions).reshape(terminated_at, game.action_dim),
        rewards=np.array(rewards).reshape(terminated_at, game.num_agents).T,
        reward_noise=_stack(reward_noise),
        transition_noise=_stack(transition_noise),
        terminated_at=terminated_at,
        seed=seed,
        samples=np.array(samples).reshape(terminated_at, game.action_dim) if stochastic else None,
    )


def mc_return(game, policy, w, num_rollouts, base_seed, stochastic=False, exploration_std=None, returns_fn=None):
    """
    Mean discounted return per agent over the rollouts seeded by
    rollout_seed(base_seed, i).

    :param returns_fn:
        Maps a trajectory to the vector being averaged; defaults to the
        per-agent discounted returns.
    :returns:
        :class:`MonteCarloEstimate` with the mean and its standard error.
    """
    if num_rollouts < 1:
        raise ConfigurationError("num_rollouts must be at least 1", key="num_rollouts")
    if returns_fn is None:

        def returns_fn(trajectory):
            return trajectory.discounted_returns(game.discount)

    def one(index):
        trajectory = rollout(game, policy, w, rollout_seed(base_seed, index), stochastic, exploration_std)
        return np.atleast_1d(returns_fn(trajectory))

    values = np.array(ordered_map(one, range(num_rollouts)))
    mean = values.mean(axis=0)
    if num_rollouts > 1:
        stderr = values.std(axis=0, ddof=1) / math.sqrt(num_rollouts)
    else:
        stderr = np.zeros_like(mean)
    return MonteCarloEstimate(mean=mean, stderr=stderr, num_rollouts=num_rollouts)


def constraint_violations(game, trajectory, tol=1e-12):
    """
    Steps at which g(x_i, a_i) has a positive component.

    Constraints beyond the action box are reported, not enforced.
    """
    if game.constraints is None:
        return []
    violations = []
    for i in range(trajectory.terminated_at):
        g = np.asarray(game.constraints(trajectory.states[i], trajectory.actions[i]), dtype=float)
        if g.size and g.max() > tol:
            violations.append((i, float(g.max())))
    if violations:
        log.warning(f"{game.name}: {len(violations)} steps violate g <= 0 (first at step {violations[0][0]})")
    return violations


def evaluation_violations(game, policy, w, num_rollouts, base_seed):
    """
    Number of steps violating g <= 0 over the deterministic rollouts
    mc_return would evaluate with the same seeds.
    """

    def one(index):
        trajectory = rollout(game, policy, w, rollout_seed(base_seed, index))
        return len(constraint_violations(game, trajectory))

    if game.constraints is None:
        return 0
    return int(sum(ordered_map(one, range(num_rollouts))))
