"""
Finite-difference utilities and the sampled check of the conditions under
which a game is a Markov potential game.

All derivatives are taken of the closed-loop expected reward
E_sigma[r_k(x, pi(x, w), sigma)] as a function of the joint point
z = (x, w). Expectations reuse one fixed set of noise draws per check
point, so every perturbed evaluation sees the same randomness.
"""
import logging
import math
from dataclasses import dataclass, field
from functools import partial

import numpy as np
from scipy.stats import qmc

from mpg.game import Box, check_dimensions
from mpg.lib import ConfigurationError, InfeasibleError, NumericalDomainError, ordered_map

log = logging.getLogger(__name__)

MPG = "MPG"
NON_MPG = "non-MPG"
INCONCLUSIVE = "inconclusive"

CONDITIONS = ("cond-ww", "cond-wx", "cond-xx", "separability", "null-gradient")

# Width of the inconclusive band, in multiples of the tolerance.
INCONCLUSIVE_BAND = 3.0

STATEMENTS = {
    MPG: "no violation found at sampled points",
    NON_MPG: "violation found at sampled points",
    INCONCLUSIVE: "residuals within the finite-difference noise band of the tolerance",
}


@dataclass(frozen=True)
class FdConfig:
    """
    :param step: relative step; coordinate i moves by step * max(1, |z_i|).
    :param num_points: number of check points.
    :param noise_samples: paired noise draws per expectation.
    :param margin: fraction of each bounded width kept clear of the box faces.
    :param max_block: parameter blocks larger than this are differentiated along as
        many random unit directions instead of every coordinate.
    """

    step: float = 1e-4
    num_points: int = 32
    noise_samples: int = 64
    base_seed: int = 0
    tolerance: float = 1e-3
    margin: float = 0.1
    max_block: int = 8
    scheme: str = "central"

    def __post_init__(self):
        if not self.step > 0.0:
            raise ConfigurationError("step must be positive", key="step")
        if self.num_points < 1:
            raise ConfigurationError("num_points must be at least 1", key="num_points")
        if self.noise_samples < 1:
            raise ConfigurationError("noise_samples must be at least 1", key="noise_samples")
        if not self.tolerance > 0.0:
            raise ConfigurationError("tolerance must be positive", key="tolerance")
        if not 0.0 <= self.margin < 0.5:
            raise ConfigurationError("margin must lie in [0, 0.5)", key="margin")
        if self.max_block < 1:
            raise ConfigurationError("max_block must be at least 1", key="max_block")
        if self.scheme != "central":
            raise ConfigurationError(f"Unsupported difference scheme {self.scheme!r}", key="scheme")

    def step_for(self, value):
        return self.step * max(1.0, abs(float(value)))


@dataclass
class MpgReport:
    verdict: str
    residuals: dict
    raw_residuals: dict
    tolerance: float
    points_sampled: int
    points_skipped: int
    game: str = ""
    worst_point: list = field(default_factory=list)

    @property
    def statement(self):
        return STATEMENTS[self.verdict]

    def to_dict(self):
        return {
            "game": self.game,
            "verdict": self.verdict,
            "statement": self.statement,
            "tolerance": self.tolerance,
            "residuals": dict(self.residuals),
            "raw_residuals": dict(self.raw_residuals),
            "points_sampled": self.points_sampled,
            "points_skipped": self.points_skipped,
            "worst_point": list(self.worst_point),
        }


def _check_finite(values, coordinate):
    if not np.all(np.isfinite(values)):
        raise NumericalDomainError(
            f"Non-finite evaluation when perturbing coordinate {coordinate}", coordinate=coordinate
        )
    return values


def fd_grad(fn, point, cfg=None):
    """
    Central-difference gradient of a scalar function.

    :raises:
        :class:`~mpg.lib.NumericalDomainError` naming the coordinate whose
        perturbed evaluation was not finite.
    """
    cfg = cfg or FdConfig()
    point = np.asarray(point, dtype=float)
    grad = np.empty(point.size)
    for i in range(point.size):
        h = cfg.step_for(point[i])
        up, down = point.copy(), point.copy()
        up[i] += h
        down[i] -= h
        f_up = _check_finite(fn(up), i)
        f_down = _check_finite(fn(down), i)
        grad[i] = (f_up - f_down) / (2.0 * h)
    return grad


def fd_jacobian(fn, point, cfg=None, coordinates=None):
    """
    Central-difference Jacobian of a vector function, shape (m, len(coordinates)).
    """
    cfg = cfg or FdConfig()
    point = np.asarray(point, dtype=float)
    coordinates = range(point.size) if coordinates is None else coordinates
    columns = []
    for i in coordinates:
        h = cfg.step_for(point[i])
        up, down = point.copy(), point.copy()
        up[i] += h
        down[i] -= h
        f_up = _check_finite(np.atleast_1d(fn(up)), i)
        f_down = _check_finite(np.atleast_1d(fn(down)), i)
        columns.append((f_up - f_down) / (2.0 * h))
    if not columns:
        return np.zeros((np.atleast_1d(fn(point)).size, 0))
    return np.stack(columns, axis=1)


def directional_derivative(fn, point, direction, h):
    up = _check_finite(np.asarray(fn(point + h * direction), dtype=float), "direction")
    down = _check_finite(np.asarray(fn(point - h * direction), dtype=float), "direction")
    return (up - down) / (2.0 * h)


def mixed_partial(fn, point, u, v, hu, hv):
    """
    Four-point estimate of d^2 fn / du dv at point along directions u and v.
    """
    values = []
    for su, sv in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
        values.append(_check_finite(np.asarray(fn(point + su * hu * u + sv * hv * v), dtype=float), "mixed"))
    return (values[0] - values[1] - values[2] + values[3]) / (4.0 * hu * hv)


def require_feasible(game, x, a):
    """
    :raises:
        :class:`~mpg.lib.InfeasibleError` when the joint action a lies outside
        the action box at x.
    """
    if not game.action_bounds(x).contains(a):
        raise InfeasibleError(f"Policy output {np.round(a, 6)} leaves the action box at x={np.round(x, 6)}")


def draw_reward_noise(game, rng, x, a, num_samples):
    """
    Joint reward noise of all agents, one row per sample. Deterministic games
    get a single empty row.
    """
    if not game.stochastic:
        return np.zeros((1, 0))
    return np.array([game.noise_model.sample(rng, x, a).reward for _ in range(num_samples)], dtype=float)


class ClosedLoop:
    """
    Mean over fixed noise draws of per-agent terms evaluated at the raw
    policy output, as a function of z = (x, w).

    ``terms`` are callables f(x, a, sigma) broadcasting over the rows of sigma.
    With ``feasible_only`` every evaluation first checks that the raw output
    lies in the action box at x.
    """

    def __init__(self, game, policy, sigma, terms, feasible_only=False):
        self.game = game
        self.policy = policy
        self.sigma = sigma
        self.terms = terms
        self.feasible_only = feasible_only

    @classmethod
    def rewards(cls, game, policy, sigma, feasible_only=False):
        terms = [partial(game.reward, k) for k in range(game.num_agents)]
        return cls(game, policy, sigma, terms, feasible_only)

    def split(self, z):
        return z[: self.game.state_dim], z[self.game.state_dim :]

    def at_action(self, x, a):
        rows = self.sigma.shape[0]
        return np.array([np.mean(np.broadcast_to(term(x, a, self.sigma), (rows,))) for term in self.terms])

    def __call__(self, z):
        x, w = self.split(np.asarray(z, dtype=float))
        a = self.policy.forward(x, w)
        if self.feasible_only:
            require_feasible(self.game, x, a)
        return self.at_action(x, a)


def joint_box(game, policy):
    return Box(
        np.concatenate([game.state_box.lower, policy.param_box.lower]),
        np.concatenate([game.state_box.upper, policy.param_box.upper]),
    )


def sample_check_points(game, policy, cfg):
    """
    cfg.num_points joint points (x, w): a scrambled Sobol sequence over the
    bounded components of the shrunken box, seeded draws elsewhere.
    """
    box = joint_box(game, policy).interior(cfg.margin)
    bounded = box.bounded
    rng = np.random.default_rng(cfg.base_seed)
    points = np.empty((cfg.num_points, box.size))
    if bounded.any():
        sobol = qmc.Sobol(d=int(bounded.sum()), scramble=True, seed=cfg.base_seed)
        unit = sobol.random_base2(max(0, math.ceil(math.log2(cfg.num_points))))[: cfg.num_points]
        points[:, bounded] = box.lower[bounded] + unit * box.width[bounded]
    state_dim = game.state_dim
    for row in points:
        x0 = game.sample_initial(rng)
        w0 = policy.initial_params(rng)
        free = ~bounded
        row[:state_dim][free[:state_dim]] = x0[free[:state_dim]]
        row[state_dim:][free[state_dim:]] = w0[free[state_dim:]]
    return points


def block_directions(policy, k, cfg, rng):
    """Finite-difference directions in agent k's parameter block, as vectors of length W."""
    block = policy.param_slices[k]
    size = block.stop - block.start
    if size <= cfg.max_block:
        raw = np.eye(size)
    else:
        raw = rng.standard_normal((cfg.max_block, size))
        raw /= np.linalg.norm(raw, axis=1, keepdims=True)
    directions = np.zeros((raw.shape[0], policy.num_params))
    directions[:, block] = raw
    return directions


def shared_state_components(game, k, j):
    decomposition = game.decomposition
    if decomposition is None or not decomposition.policy_indices:
        return set(range(game.state_dim))
    return set(decomposition.theta_indices(k)) & set(decomposition.theta_indices(j))


class _Residuals:
    def __init__(self):
        self.raw = {}
        self.normalized = {}

    def record(self, condition, a, b):
        a, b = float(a), float(b)
        diff = abs(a - b)
        self.raw[condition] = max(self.raw.get(condition, 0.0), diff)
        self.normalized[condition] = max(self.normalized.get(condition, 0.0), diff / max(1.0, abs(a), abs(b)))


def point_residuals(game, policy, x, w, cfg=None, seed=0):
    """
    Residuals of every applicable condition at one point (x, w).

    :raises:
        :class:`~mpg.lib.InfeasibleError` when the raw policy output leaves the
        action box at the point or anywhere on a difference stencil.

    :returns: a pair (normalized, raw) of dicts keyed by condition name.
    """
    cfg = cfg or FdConfig()
    x = np.asarray(x, dtype=float)
    w = np.asarray(w, dtype=float)
    n, state_dim = game.num_agents, game.state_dim
    a = policy.forward(x, w)
    require_feasible(game, x, a)
    rng = np.random.default_rng(seed)
    sigma = draw_reward_noise(game, rng, x, a, cfg.noise_samples)
    rewards = ClosedLoop.rewards(game, policy, sigma, feasible_only=True)
    z = np.concatenate([x, w])
    size = z.size

    def state_direction(m):
        e = np.zeros(size)
        e[m] = 1.0
        return e, cfg.step_for(x[m])

    def param_direction(d):
        e = np.concatenate([np.zeros(state_dim), d])
        return e, cfg.step_for(np.max(np.abs(w[d != 0.0]), initial=0.0))

    directions = [[param_direction(d) for d in block_directions(policy, k, cfg, rng)] for k in range(n)]
    shared = {(k, j): shared_state_components(game, k, j) for k in range(n) for j in range(n) if k != j}
    result = _Residuals()

    for j in range(n):
        for u, hu in directions[j]:
            # cross-parameter symmetry
            for k in range(j + 1, n):
                for v, hv in directions[k]:
                    h = mixed_partial(rewards, z, u, v, hu, hv)
                    result.record("cond-ww", h[k], h[j])
            # state/parameter symmetry on shared state components
            components = sorted(set().union(*(shared[(k, j)] for k in range(n) if k != j)))
            for m in components:
                e, hm = state_direction(m)
                h = mixed_partial(rewards, z, e, u, hm, hu)
                for k in range(n):
                    if k != j and m in shared[(k, j)]:
                        result.record("cond-wx", h[k], h[j])

    for m in range(state_dim):
        for m2 in range(m, state_dim):
            pairs = [(k, j) for k in range(n) for j in range(k + 1, n) if {m, m2} <= shared[(k, j)]]
            if not pairs:
                continue
            e, hm = state_direction(m)
            e2, hm2 = state_direction(m2)
            h = mixed_partial(rewards, z, e, e2, hm, hm2)
            for k, j in pairs:
                result.record("cond-xx", h[k], h[j])

    if game.decomposition is not None:
        _decomposition_residuals(game, policy, rewards, sigma, z, directions, cfg, result)
    return result.normalized, result.raw


def _decomposition_residuals(game, policy, rewards, sigma, z, directions, cfg, result):
    decomposition = game.decomposition
    x, w = rewards.split(z)
    a = policy.forward(x, w)
    rows = sigma.shape[0]
    common = np.broadcast_to(decomposition.common(x, a, sigma), (rows,))
    for k in range(game.num_agents):
        r_k = np.broadcast_to(game.reward(k, x, a, sigma), (rows,))
        theta_k = np.broadcast_to(decomposition.non_common(k, x, a, sigma), (rows,))
        gap = np.abs(r_k - common - theta_k)
        worst = int(np.argmax(gap))
        result.record("separability", r_k[worst], common[worst] + theta_k[worst])

        theta = ClosedLoop(game, policy, sigma, [partial(decomposition.non_common, k)], feasible_only=True)
        stencils = []
        for m in decomposition.theta_indices(k):
            e = np.zeros(z.size)
            e[m] = 1.0
            stencils.append((e, cfg.step_for(x[m])))
        stencils.extend(directions[k])
        for e, h in stencils:
            slope = directional_derivative(theta, z, e, h)[0]
            reward_slope = directional_derivative(rewards, z, e, h)[k]
            diff = abs(slope)
            result.raw["null-gradient"] = max(result.raw.get("null-gradient", 0.0), diff)
            result.normalized["null-gradient"] = max(
                result.normalized.get("null-gradient", 0.0), diff / max(1.0, abs(reward_slope))
            )


def classify(residuals, tolerance):
    worst = max(residuals.values(), default=0.0)
    if worst <= tolerance:
        return MPG
    if worst > INCONCLUSIVE_BAND * tolerance:
        return NON_MPG
    return INCONCLUSIVE


def check_mpg_conditions(game, policy, cfg=None):
    """
    Test the symmetry conditions on expected mixed partials, and the declared
    reward decomposition when there is one, at sampled points.

    A sampled check can refute the potential structure but never prove it;
    an MPG verdict means no violation was found at the sampled points.
    """
    cfg = cfg or FdConfig()
    check_dimensions(game, policy)
    points = sample_check_points(game, policy, cfg)
    state_dim = game.state_dim
    log.info(f"Checking potential-game conditions for {game.name} at {len(points)} points")

    def one(indexed):
        index, z = indexed
        try:
            return point_residuals(game, policy, z[:state_dim], z[state_dim:], cfg, seed=cfg.base_seed + index)
        except (NumericalDomainError, InfeasibleError) as exc:
            log.warning(f"Skipping check point {index}: {exc}")
            return None

    outcomes = ordered_map(one, enumerate(points))
    normalized, raw, worst_point, worst_value = {}, {}, [], -1.0
    skipped = 0
    for z, outcome in zip(points, outcomes):
        if outcome is None:
            skipped += 1
            continue
        point_normalized, point_raw = outcome
        log.debug(f"Residuals at {z[: state_dim + 4]}: {point_normalized}")
        for condition in point_normalized:
            normalized[condition] = max(normalized.get(condition, 0.0), point_normalized[condition])
            raw[condition] = max(raw.get(condition, 0.0), point_raw[condition])
        local = max(point_normalized.values(), default=0.0)
        if local > worst_value:
            worst_value, worst_point = local, z[: state_dim + min(policy.num_params, 16)].tolist()

    if skipped == len(points):
        verdict = INCONCLUSIVE
        log.warning(f"{game.name}: every check point was skipped")
    else:
        verdict = classify(normalized, cfg.tolerance)
    if verdict == INCONCLUSIVE:
        log.warning(f"{game.name}: check is inconclusive (residuals {normalized})")
    else:
        log.info(f"{game.name}: verdict {verdict}, {STATEMENTS[verdict]}")
    return MpgReport(
        verdict=verdict,
        residuals={c: normalized[c] for c in CONDITIONS if c in normalized},
        raw_residuals={c: raw[c] for c in CONDITIONS if c in raw},
        tolerance=cfg.tolerance,
        points_sampled=len(points),
        points_skipped=skipped,
        game=game.name,
        worst_point=worst_point,
    )
