import dataclasses
import logging
import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from mpg.game import Box, Decomposition, GameSpec, Noise, truncation_horizon
from mpg.lib import ConfigurationError, log_floor

log = logging.getLogger(__name__)

# Fish stock below which the resource counts as depleted.
FISH_DEPLETED = 1e-9
# Battery level below which an agent can no longer transmit.
BATTERY_DEPLETED = 1e-6


@dataclass(frozen=True)
class FishWarParams:
    num_agents: int = 2
    alpha: float = 0.5
    gamma: float = 0.9
    x0: float = 1.0
    horizon: int = 200

    def __post_init__(self):
        if self.num_agents < 1:
            raise ConfigurationError("fishwar: num_agents must be at least 1", key="num_agents")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigurationError(f"fishwar: alpha must lie in (0, 1), got {self.alpha}", key="alpha")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigurationError(f"fishwar: gamma must lie in [0, 1), got {self.gamma}", key="gamma")
        if not self.x0 > 0.0:
            raise ConfigurationError(f"fishwar: x0 must be positive, got {self.x0}", key="x0")
        if self.horizon < 1:
            raise ConfigurationError("fishwar: horizon must be positive", key="horizon")


@dataclass(frozen=True)
class MacParams:
    """
    Constants of the multiple-access channel game.

    ``gains`` are the squared channel magnitudes |h_k|^2; ``fading`` and
    ``discharge`` the ranges the per-step fading coefficient and battery
    discharge factor are drawn from.
    """

    num_agents: int = 4
    gains: Tuple[float, ...] = (2.019, 1.002, 0.514, 0.308)
    fading: Tuple[float, float] = (0.5, 1.0)
    discharge: Tuple[float, float] = (0.7, 1.3)
    alpha: float = 0.1
    battery_max: float = 10.0
    power_max: float = 2.0
    gamma: float = 0.95
    horizon: int = 100

    def __post_init__(self):
        for name in ("gains", "fading", "discharge"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if self.num_agents < 1:
            raise ConfigurationError("mac: num_agents must be at least 1", key="num_agents")
        if len(self.gains) != self.num_agents:
            raise ConfigurationError(
                f"mac: {len(self.gains)} channel gains given for {self.num_agents} agents", key="gains"
            )
        if min(self.gains) < 0.0:
            raise ConfigurationError("mac: channel gains must be non-negative", key="gains")
        for name in ("fading", "discharge"):
            lo, hi = getattr(self, name)
            if not 0.0 < lo <= hi:
                raise ConfigurationError(f"mac: {name} range must satisfy 0 < low <= high", key=name)
        if self.alpha < 0.0:
            raise ConfigurationError("mac: alpha must be non-negative", key="alpha")
        if not self.battery_max > 0.0:
            raise ConfigurationError("mac: battery_max must be positive", key="battery_max")
        if not self.power_max > 0.0:
            raise ConfigurationError("mac: power_max must be positive", key="power_max")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigurationError(f"mac: gamma must lie in [0, 1), got {self.gamma}", key="gamma")
        if self.horizon < 1:
            raise ConfigurationError("mac: horizon must be positive", key="horizon")


class MacNoise:
    """Fading (reward noise) and discharge (transition noise), i.i.d. uniform per step and agent."""

    stochastic = True

    def __init__(self, params):
        self.params = params

    def sample(self, rng, x, a):
        n = self.params.num_agents
        fading = rng.uniform(*self.params.fading, size=n)
        discharge = rng.uniform(*self.params.discharge, size=n)
        return Noise(fading, discharge)


def make_fishwar(params=None):
    """
    The great fish war: agents share a stock x that regrows as
    x' = (x - sum_k a_k)^alpha and each agent k collects log(a_k).
    """
    params = params or FishWarParams()
    n, alpha = params.num_agents, params.alpha
    needed = truncation_horizon(params.gamma)
    if params.horizon < needed:
        log.warning(
            f"fishwar: horizon {params.horizon} leaves a truncation tail above 1e-4 of the reward bound "
            f"(gamma={params.gamma} needs {needed} steps)"
        )

    def reward(k, x, a, sigma):
        return np.log(log_floor(np.asarray(a)[..., k]))

    def transition(x, a, theta):
        remaining = max(float(x[0]) - float(np.sum(a)), 0.0)
        return np.array([remaining**alpha])

    def action_bounds(x):
        return Box(np.zeros(n), np.full(n, max(float(x[0]), 0.0)))

    def common(x, a, sigma):
        return np.log(log_floor(np.asarray(a))).sum(axis=-1) - (n - 1) * np.log(log_floor(np.asarray(x)[..., 0]))

    def non_common(k, x, a, sigma):
        logs = np.log(log_floor(np.asarray(a)))
        others = logs.sum(axis=-1) - logs[..., k]
        return -others + (n - 1) * np.log(log_floor(np.asarray(x)[..., 0]))

    decomposition = Decomposition(
        common=common,
        non_common=non_common,
        policy_indices=((0,),) * n,
        reward_indices=((),) * n,
    )
    return GameSpec(
        name="fishwar",
        num_agents=n,
        state_dim=1,
        action_dims=(1,) * n,
        discount=params.gamma,
        horizon=params.horizon,
        reward=reward,
        transition=transition,
        state_box=Box([0.0], [max(1.0, params.x0)]),
        initial_state=np.array([params.x0]),
        action_bounds=action_bounds,
        policy_indices=((0,),) * n,
        decomposition=decomposition,
        is_terminal=lambda x: float(x[0]) < FISH_DEPLETED,
        linear_gain_box=(0.0, 1.0),
        params=params,
    )


def make_mac(params=None):
    """
    Energy-constrained multiple-access channel.

    Agent k transmits with power a_k drawn from its own battery x_k and is
    rewarded with its achievable rate, the other agents' signals counting as
    interference, plus alpha times the energy it keeps.
    """
    params = params or MacParams()
    n = params.num_agents
    gains = np.array(params.gains)
    alpha, battery_max, power_max = params.alpha, params.battery_max, params.power_max
    discharge_max = params.discharge[1]

    def signal(a, sigma):
        return gains * np.asarray(sigma) * np.asarray(a)

    def reward(k, x, a, sigma):
        s = signal(a, sigma)
        total = s.sum(axis=-1)
        rate = np.log(log_floor(1.0 + s[..., k] / (1.0 + total - s[..., k])))
        return rate + alpha * np.asarray(x)[..., k]

    def transition(x, a, theta):
        return np.clip(np.asarray(x) - np.asarray(theta) * np.asarray(a), 0.0, battery_max)

    def action_bounds(x):
        return Box(np.zeros(n), np.minimum(power_max, np.maximum(np.asarray(x, dtype=float), 0.0) / discharge_max))

    def constraints(x, a):
        x, a = np.asarray(x, dtype=float), np.asarray(a, dtype=float)
        return np.concatenate([-a, a - power_max, -x, x - battery_max])

    def common(x, a, sigma):
        total = signal(a, sigma).sum(axis=-1)
        return np.log(log_floor(1.0 + total)) + alpha * np.asarray(x).sum(axis=-1)

    def non_common(k, x, a, sigma):
        s = signal(a, sigma)
        x = np.asarray(x)
        interference = s.sum(axis=-1) - s[..., k]
        return -np.log(log_floor(1.0 + interference)) - alpha * (x.sum(axis=-1) - x[..., k])

    own = tuple((k,) for k in range(n))
    return GameSpec(
        name="mac",
        num_agents=n,
        state_dim=n,
        action_dims=(1,) * n,
        discount=params.gamma,
        horizon=params.horizon,
        reward=reward,
        transition=transition,
        state_box=Box.uniform(0.0, battery_max, n),
        initial_state=np.full(n, battery_max),
        action_bounds=action_bounds,
        policy_indices=own,
        constraints=constraints,
        noise_model=MacNoise(params),
        decomposition=Decomposition(common=common, non_common=non_common, policy_indices=own, reward_indices=own),
        is_terminal=lambda x: bool(np.all(np.asarray(x) < BATTERY_DEPLETED)),
        linear_gain_box=(0.0, power_max / battery_max),
        params=params,
    )


def make_cooperative(base):
    """
    Variant of base in which every agent is rewarded with the declared common term.
    """
    if base.decomposition is None:
        raise ConfigurationError(f"{base.name} declares no common reward term", key="decomposition")
    common = base.decomposition.common

    def reward(k, x, a, sigma):
        return common(x, a, sigma)

    def non_common(k, x, a, sigma):
        return np.zeros_like(np.asarray(common(x, a, sigma), dtype=float))

    everything = tuple(range(base.state_dim))
    decomposition = Decomposition(
        common=common,
        non_common=non_common,
        policy_indices=base.decomposition.policy_indices,
        reward_indices=(everything,) * base.num_agents,
    )
    return dataclasses.replace(base, name=f"cooperative-{base.name}", reward=reward, decomposition=decomposition)


def make_non_mpg_counterexample():
    """
    Two agents, one static state and rewards r_1 = a_1 a_2^2, r_2 = a_2 a_1.

    Under linear policies the cross-derivatives of the two rewards with
    respect to the two parameter blocks differ, so no potential exists.
    """

    def reward(k, x, a, sigma):
        a = np.asarray(a)
        if k == 0:
            return a[..., 0] * a[..., 1] ** 2
        return a[..., 1] * a[..., 0]

    return GameSpec(
        name="counterexample",
        num_agents=2,
        state_dim=1,
        action_dims=(1, 1),
        discount=0.9,
        horizon=20,
        reward=reward,
        transition=lambda x, a, theta: np.array(x, dtype=float),
        state_box=Box([0.0], [2.0]),
        initial_state=np.array([1.0]),
        action_bounds=lambda x: Box.unbounded(2),
        policy_indices=((0,), (0,)),
        linear_gain_box=(0.0, 2.0),
    )


def _log_stock_path(params, w):
    w = np.asarray(w, dtype=float)
    if w.shape != (params.num_agents,):
        raise ConfigurationError(f"fishwar: expected {params.num_agents} gains, got {w.shape}", key="w")
    remaining = 1.0 - w.sum()
    if np.any(w <= 0.0) or remaining <= 0.0:
        raise ConfigurationError("fishwar: the value recursion needs w_k > 0 and sum(w) < 1", key="w")
    log_stock = np.empty(params.horizon)
    log_stock[0] = math.log(params.x0)
    for i in range(1, params.horizon):
        log_stock[i] = params.alpha * (math.log(remaining) + log_stock[i - 1])
    return log_stock, params.gamma ** np.arange(params.horizon)


def fishwar_value(params, w):
    """
    Per-agent discounted return of the linear policy a_k = w_k x over the
    horizon, from log x_{i+1} = alpha (log(1 - sum w) + log x_i).
    """
    log_stock, discounts = _log_stock_path(params, w)
    return np.array([discounts @ (math.log(w_k) + log_stock) for w_k in np.asarray(w, dtype=float)])


def fishwar_potential_value(params, w):
    """Discounted sum of log x_i + sum_k log w_k along the same path."""
    log_stock, discounts = _log_stock_path(params, w)
    return float(discounts @ (log_stock + np.log(np.asarray(w, dtype=float)).sum()))


ENVIRONMENTS = {
    "fishwar": (FishWarParams, make_fishwar),
    "mac": (MacParams, make_mac),
}


def build_environment(name, params=None):
    """
    Game registered under name, with params a mapping of constructor arguments.

    ``cooperative-<base>`` wraps a registered base game, ``counterexample``
    takes no parameters.
    """
    params = dict(params or {})
    if name == "counterexample":
        if params:
            raise ConfigurationError("counterexample takes no parameters", key=sorted(params)[0])
        return make_non_mpg_counterexample()
    cooperative = name.startswith("cooperative-")
    base_name = name[len("cooperative-") :] if cooperative else name
    if base_name not in ENVIRONMENTS:
        raise ConfigurationError(f"Unknown environment {name!r}", key="name")
    params_cls, factory = ENVIRONMENTS[base_name]
    known = {f.name for f in dataclasses.fields(params_cls)}
    unknown = sorted(set(params) - known)
    if unknown:
        raise ConfigurationError(f"Unknown {base_name} parameter {unknown[0]!r}", key=unknown[0])
    game = factory(params_cls(**params))
    log.debug(f"Built environment {name} with {game.num_agents} agents")
    return make_cooperative(game) if cooperative else game
