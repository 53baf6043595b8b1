import csv
import logging

import numpy as np
from scipy.integrate import trapezoid

from mpg.game import check_dimensions, mc_return
from mpg.lib import ConfigurationError, InfeasibleError, NumericalDomainError, PathError, ordered_map
from mpg.numdiff import (
    ClosedLoop,
    FdConfig,
    draw_reward_noise,
    fd_jacobian,
    joint_box,
    require_feasible,
    sample_check_points,
)

log = logging.getLogger(__name__)

LINE_INTEGRAL = "line-integral"
DECLARED = "declared"


def _noise_at(game, policy, x, w, cfg, seed):
    rng = np.random.default_rng(seed)
    return draw_reward_noise(game, rng, x, policy.forward(x, w), cfg.noise_samples)


def _state_sources(game):
    """
    For every state component, the agents whose non-common term does not
    read it; their reward gradient along that component is the potential's.
    """
    decomposition = game.decomposition
    everyone = list(range(game.num_agents))
    if decomposition is None:
        return [everyone] * game.state_dim
    sources = []
    for m in range(game.state_dim):
        agents = [k for k in everyone if m in decomposition.theta_indices(k)]
        sources.append(agents or everyone)
    return sources


def closed_loop_gradients(closed_loop, policy, x, w, cfg):
    """
    Gradients of the closed-loop terms at (x, w).

    :returns:
        ``(d_state, d_action, d_params)``; d_state has shape (terms, S), the
        total derivative through the policy. d_params[i][k] is the gradient of
        term i with respect to agent k's block, by the chain rule through the
        policy's exact Jacobian.
    """
    state_dim = x.size
    z = np.concatenate([x, w])
    d_state = fd_jacobian(closed_loop, z, cfg, coordinates=range(state_dim))
    a = policy.forward(x, w)
    d_action = fd_jacobian(lambda act: closed_loop.at_action(x, act), a, cfg)
    jacobians = [policy.agent_jacobian(k, x, w_k) for k, w_k in enumerate(policy.blocks(w))]
    d_params = [
        [jac.T @ d_action[i, s] for jac, s in zip(jacobians, policy.action_slices)] for i in range(d_action.shape[0])
    ]
    return d_state, d_action, d_params


def potential_field(game, policy, x, w, sigma, cfg):
    """
    Reward field whose line integral is the potential: the state part
    averages the agents' state gradients, block k is agent k's own
    parameter gradient.
    """
    rewards = ClosedLoop.rewards(game, policy, sigma)
    d_state, _, d_params = closed_loop_gradients(rewards, policy, x, w, cfg)
    state_part = np.array([d_state[agents, m].mean() for m, agents in enumerate(_state_sources(game))])
    return np.concatenate([state_part] + [d_params[k][k] for k in range(game.num_agents)])


def potential_line_integral(game, policy, x, w, base, quadrature=256, seed=0, cfg=None, waypoints=None):
    """
    J(x, pi(x, w)) - J(x_bar, pi(x_bar, w_bar)) as the line integral of the
    reward field along the piecewise-linear path base -> waypoints -> (x, w).

    :param base: pair (x_bar, w_bar).
    :param waypoints: optional sequence of intermediate (x, w) pairs.
    :raises:
        :class:`~mpg.lib.PathError` when a path vertex lies outside the state x
        parameter box and :class:`~mpg.lib.NumericalDomainError` carrying the
        path abscissa in [0, 1] where the field is not finite.
    """
    cfg = cfg or FdConfig()
    if quadrature < 1:
        raise ConfigurationError("quadrature needs at least one panel", key="quadrature")
    check_dimensions(game, policy)
    x_bar, w_bar = (np.asarray(v, dtype=float) for v in base)
    vertices = [np.concatenate([x_bar, w_bar])]
    vertices += [np.concatenate([np.asarray(p, dtype=float), np.asarray(q, dtype=float)]) for p, q in waypoints or ()]
    vertices.append(np.concatenate([np.asarray(x, dtype=float), np.asarray(w, dtype=float)]))
    lengths = np.array([np.linalg.norm(q - p) for p, q in zip(vertices[:-1], vertices[1:])])
    total = float(lengths.sum())
    travelled = np.concatenate([[0.0], np.cumsum(lengths)])

    box = joint_box(game, policy)
    for vertex, distance in zip(vertices, travelled):
        if not box.contains(vertex, atol=1e-12):
            location = distance / total if total > 0.0 else 0.0
            raise PathError(
                f"Line-integral path leaves the state x parameter box at z={location:.4f}", location=location
            )
    if total == 0.0:
        return 0.0

    state_dim = game.state_dim
    sigma = _noise_at(game, policy, x_bar, w_bar, cfg, seed)
    ts = np.linspace(0.0, 1.0, quadrature + 1)
    integral = 0.0
    for p, q, length, start in zip(vertices[:-1], vertices[1:], lengths, travelled[:-1]):
        if length == 0.0:
            continue
        delta = q - p

        def integrand(t, p=p, delta=delta, length=length, start=start):
            z = p + t * delta
            location = (start + t * length) / total
            try:
                value = potential_field(game, policy, z[:state_dim], z[state_dim:], sigma, cfg) @ delta
            except NumericalDomainError as exc:
                raise NumericalDomainError(f"Non-finite reward field at z={location:.4f}", location=location) from exc
            if not np.isfinite(value):
                raise NumericalDomainError(f"Non-finite reward field at z={location:.4f}", location=location)
            return value

        integral += trapezoid(np.array(ordered_map(integrand, ts)), ts)
    return float(integral)


class PotentialEvaluator:
    """
    The potential J of a game, either the declared common reward term or the
    line integral of the reward field from a base point.

    :param offset: constant added to every value; J is only defined up to one.
    """

    def __init__(self, mode, game, policy=None, base=None, quadrature=256, seed=0, cfg=None, offset=0.0):
        if mode not in (LINE_INTEGRAL, DECLARED):
            raise ConfigurationError(f"Unknown potential mode {mode!r}", key="mode")
        if mode == DECLARED and game.decomposition is None:
            raise ConfigurationError(f"{game.name} declares no common reward term", key="decomposition")
        if mode == LINE_INTEGRAL and (policy is None or base is None):
            raise ConfigurationError("A line-integral potential needs a policy and a base point", key="base")
        self.mode = mode
        self.game = game
        self.policy = policy
        self.base = base
        self.quadrature = quadrature
        self.seed = seed
        self.cfg = cfg or FdConfig()
        self.offset = float(offset)
        self._warned = False

    def term(self, x, a, sigma):
        """Declared J(x, a, sigma), broadcasting over leading axes."""
        return self.game.decomposition.common(x, a, sigma) + self.offset

    def step_values(self, states, actions, reward_noise, w=None):
        """J at each step of a trajectory."""
        if self.mode == DECLARED:
            values = self.term(states, actions, reward_noise)
            return np.broadcast_to(np.asarray(values, dtype=float), (len(actions),)).copy()
        if not self._warned:
            log.warning(
                f"Evaluating a line-integral potential along trajectories of {self.game.name}; "
                "every step costs a full quadrature."
            )
            self._warned = True
        return np.array([self.value(x, w) for x in states])

    def value(self, x, w, sigma=None):
        x, w = np.asarray(x, dtype=float), np.asarray(w, dtype=float)
        if self.mode == LINE_INTEGRAL:
            integral = potential_line_integral(
                self.game, self.policy, x, w, self.base, self.quadrature, self.seed, self.cfg
            )
            return integral + self.offset
        if sigma is None:
            sigma = _noise_at(self.game, self.policy, x, w, self.cfg, self.seed)
        return float(ClosedLoop(self.game, self.policy, sigma, [self.term])(np.concatenate([x, w]))[0])

    def gradient(self, x, w, sigma=None):
        """
        Gradient of J(x, pi(x, w)) over (x, w); in line-integral mode this is
        the reward field itself.
        """
        x, w = np.asarray(x, dtype=float), np.asarray(w, dtype=float)
        if sigma is None:
            sigma = _noise_at(self.game, self.policy, x, w, self.cfg, self.seed)
        if self.mode == LINE_INTEGRAL:
            return potential_field(self.game, self.policy, x, w, sigma, self.cfg)
        closed_loop = ClosedLoop(self.game, self.policy, sigma, [self.term])
        d_state, _, d_params = closed_loop_gradients(closed_loop, self.policy, x, w, self.cfg)
        return np.concatenate([d_state[0]] + d_params[0])


def declared_potential(game, policy=None, seed=0, cfg=None, offset=0.0):
    """
    :raises: :class:`~mpg.lib.ConfigurationError` when game has no declared decomposition.
    """
    return PotentialEvaluator(DECLARED, game, policy=policy, seed=seed, cfg=cfg, offset=offset)


def line_integral_potential(game, policy, base, quadrature=256, seed=0, cfg=None):
    return PotentialEvaluator(LINE_INTEGRAL, game, policy, base=base, quadrature=quadrature, seed=seed, cfg=cfg)


def potential_return(potential, trajectory, gamma, w=None):
    """Discounted sum of J along a trajectory."""
    n = trajectory.terminated_at
    values = potential.step_values(trajectory.states[:n], trajectory.actions, trajectory.reward_noise, w)
    return float((gamma ** np.arange(n)) @ values)


def potential_consistency_check(game, policy, potential, cfg=None):
    """
    Largest gap, over sampled points and agents, between the expected reward
    gradients and the potential's: along the state components agent k's
    non-common term reads, and along agent k's own parameter block.

    :returns: dict with ``state`` and ``params`` residuals and point counts.
    """
    cfg = cfg or FdConfig()
    check_dimensions(game, policy)
    points = sample_check_points(game, policy, cfg)
    state_dim = game.state_dim
    if game.decomposition is not None:
        components = [list(game.decomposition.theta_indices(k)) for k in range(game.num_agents)]
    else:
        components = [list(range(state_dim))] * game.num_agents

    def one(indexed):
        index, z = indexed
        x, w = z[:state_dim], z[state_dim:]
        try:
            require_feasible(game, x, policy.forward(x, w))
            sigma = _noise_at(game, policy, x, w, cfg, cfg.base_seed + index)
            rewards = ClosedLoop.rewards(game, policy, sigma)
            r_state, _, r_params = closed_loop_gradients(rewards, policy, x, w, cfg)
            grad_j = potential.gradient(x, w, sigma=sigma)
        except (NumericalDomainError, InfeasibleError) as exc:
            log.warning(f"Skipping consistency point {index}: {exc}")
            return None
        j_params = policy.blocks(grad_j[state_dim:])
        state_gap, param_gap = 0.0, 0.0
        for k in range(game.num_agents):
            if components[k]:
                state_gap = max(state_gap, float(np.max(np.abs(r_state[k, components[k]] - grad_j[components[k]]))))
            if j_params[k].size:
                param_gap = max(param_gap, float(np.max(np.abs(r_params[k][k] - j_params[k]))))
        return state_gap, param_gap

    outcomes = [o for o in ordered_map(one, enumerate(points)) if o is not None]
    state = max((o[0] for o in outcomes), default=0.0)
    params = max((o[1] for o in outcomes), default=0.0)
    log.info(f"{game.name}: potential consistency residuals state={state:.3e} params={params:.3e}")
    return {
        "state": state,
        "params": params,
        "points_sampled": len(points),
        "points_skipped": len(points) - len(outcomes),
    }


def definition_gap(game, policy, potential, w, num_deviations=4, scale=0.1, num_rollouts=None, seed=0):
    """
    Largest |dV_k - dV_J| over agents k and sampled unilateral deviations
    w_k -> v_k, where dV_k is the change of agent k's discounted return and
    dV_J the change of the discounted potential return. Both sides use the
    same rollout seeds.
    """
    w = np.asarray(w, dtype=float)
    check_dimensions(game, policy, w)
    if num_deviations < 1:
        raise ConfigurationError("num_deviations must be at least 1", key="num_deviations")
    if num_rollouts is None:
        num_rollouts = 20 if game.stochastic else 1
    rng = np.random.default_rng(seed)
    box = policy.param_box

    def values(params):
        def returns_fn(trajectory):
            returns = trajectory.discounted_returns(game.discount)
            return np.append(returns, potential_return(potential, trajectory, game.discount, params))

        return mc_return(game, policy, params, num_rollouts, seed, returns_fn=returns_fn).mean

    reference = values(w)
    gaps = []
    for k, s in enumerate(policy.param_slices):
        lower, upper = box.lower[s], box.upper[s]
        spread = np.where(np.isfinite(upper - lower), upper - lower, np.maximum(1.0, np.abs(w[s])))
        worst = 0.0
        for _ in range(num_deviations):
            v_k = np.clip(w[s] + scale * spread * rng.uniform(-1.0, 1.0, size=spread.size), lower, upper)
            deviated = values(policy.with_block(w, k, v_k))
            gap = abs((deviated[k] - reference[k]) - (deviated[-1] - reference[-1]))
            worst = max(worst, float(gap))
        gaps.append(worst)
    log.info(f"{game.name}: largest unilateral-deviation gap {max(gaps):.3e}")
    return {"max_gap": max(gaps), "per_agent": gaps, "num_deviations": num_deviations}


def max_deviation_up_to_constant(values, reference):
    """max |values - reference - c| for the c that centers the differences."""
    diff = np.asarray(values, dtype=float) - np.asarray(reference, dtype=float)
    return float(np.max(np.abs(diff - diff.mean())))


def potential_grid(game, policy, base, targets, quadrature=256, seed=0, cfg=None, declared=None):
    """
    Line-integral potential at each target (x, w), next to the declared
    potential's difference from base when one is given.
    """
    cfg = cfg or FdConfig()
    x_bar, w_bar = (np.asarray(v, dtype=float) for v in base)
    reference = declared.value(x_bar, w_bar) if declared is not None else None
    rows = []
    for index, (x, w) in enumerate(targets):
        x, w = np.asarray(x, dtype=float), np.asarray(w, dtype=float)
        row = {"point": index}
        row.update({f"x_{m}": v for m, v in enumerate(x)})
        if w.size <= 16:
            row.update({f"w_{m}": v for m, v in enumerate(w)})
        row["line_integral"] = potential_line_integral(game, policy, x, w, base, quadrature, seed, cfg)
        if declared is not None:
            row["declared"] = declared.value(x, w) - reference
        rows.append(row)
    return rows


def export_grid_csv(path, rows):
    if not rows:
        raise ConfigurationError("No grid rows to export")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(float(v)) if isinstance(v, (float, np.floating)) else v for k, v in row.items()})
    log.debug(f"Wrote {len(rows)} grid rows to {path}")
