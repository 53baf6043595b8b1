import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from mpg.game import check_dimensions, mc_return, rollout, rollout_seed
from mpg.lib import ConfigurationError, ConvergenceError, NumericalDomainError, ordered_map
from mpg.potential import LINE_INTEGRAL, potential_return

log = logging.getLogger(__name__)

BASELINES = ("none", "mean-return", "time-dependent")

# Rollout seed streams [seed, purpose, index]. Purposes are non-zero so no
# stream key hashes like a plain integer seed.
TRAIN_STREAM = 1
EVAL_STREAM = 2
FINAL_STREAM = 3

CURVE_COLUMNS = ("iteration", "value", "stderr", "kl")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 4000
    max_kl: float = 0.01
    iterations: int = 400
    baseline: str = "time-dependent"
    exploration_std: float = None
    seed: int = 0
    eval_every: int = 10
    eval_rollouts: int = 20
    backtrack_factor: float = 0.5
    max_backtracks: int = 10

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be positive", key="batch_size")
        if not self.max_kl > 0.0:
            raise ConfigurationError("max_kl must be positive", key="max_kl")
        if self.iterations < 1:
            raise ConfigurationError("iterations must be positive", key="iterations")
        if self.baseline not in BASELINES:
            raise ConfigurationError(f"baseline must be one of {BASELINES}, got {self.baseline!r}", key="baseline")
        if self.exploration_std is not None and not self.exploration_std > 0.0:
            raise ConfigurationError("exploration_std must be positive", key="exploration_std")
        if self.eval_every < 1:
            raise ConfigurationError("eval_every must be positive", key="eval_every")
        if not 1 <= self.eval_rollouts <= 1000:
            raise ConfigurationError("eval_rollouts must lie in [1, 1000]", key="eval_rollouts")
        if not 0.0 < self.backtrack_factor < 1.0:
            raise ConfigurationError("backtrack_factor must lie in (0, 1)", key="backtrack_factor")
        if self.max_backtracks < 0:
            raise ConfigurationError("max_backtracks must be non-negative", key="max_backtracks")


@dataclass
class SolveResult:
    w: np.ndarray
    value: float
    stderr: float
    curve: list = field(default_factory=list)
    terminated_reason: str = "iterations"
    best_iteration: int = 0
    evaluations: list = field(default_factory=list)

    def to_dict(self):
        return {
            "w": self.w,
            "value": self.value,
            "stderr": self.stderr,
            "terminated_reason": self.terminated_reason,
            "best_iteration": self.best_iteration,
            "iterations": len(self.curve),
            "evaluations": self.evaluations,
        }


def _rewards_to_go(values, gamma):
    discounted = values * gamma ** np.arange(values.size)
    return np.cumsum(discounted[::-1])[::-1]


def _baselines(to_go, kind):
    if kind == "none":
        return [np.zeros_like(g) for g in to_go]
    if kind == "mean-return":
        mean = np.concatenate(to_go).mean()
        return [np.full_like(g, mean) for g in to_go]
    longest = max(g.size for g in to_go)
    sums, counts = np.zeros(longest), np.zeros(longest)
    for g in to_go:
        sums[: g.size] += g
        counts[: g.size] += 1
    per_step = sums / np.maximum(counts, 1)
    return [per_step[: g.size] for g in to_go]


def _evaluate(game, policy, potential, w, num_rollouts, base_seed):
    def returns_fn(trajectory):
        return potential_return(potential, trajectory, game.discount, w)

    return mc_return(game, policy, w, num_rollouts, base_seed, returns_fn=returns_fn)


def pg_train(game, policy, potential, cfg=None, w0=None):
    """
    Maximize the expected discounted potential return over the policy
    parameters with REINFORCE and a KL-limited step.

    Each iteration collects stochastic rollouts totalling at least
    cfg.batch_size steps, forms the likelihood-ratio gradient of the
    Gaussian policy and moves along it by the largest step whose batch-mean
    KL divergence between old and new action distributions is at most
    cfg.max_kl, halving on violation. The returned parameters are the best
    ones seen at the periodic deterministic evaluations.
    """
    cfg = cfg or TrainConfig()
    check_dimensions(game, policy)
    std = np.broadcast_to(
        np.asarray(policy.exploration_std if cfg.exploration_std is None else cfg.exploration_std, dtype=float),
        (game.action_dim,),
    )
    if np.any(std <= 0.0):
        raise ConfigurationError(
            "Exploration std must be positive for a likelihood-ratio gradient", key="exploration_std"
        )
    if cfg.batch_size < game.horizon:
        raise ConfigurationError(
            f"batch_size {cfg.batch_size} is shorter than one episode ({game.horizon} steps)", key="batch_size"
        )
    if potential.mode == LINE_INTEGRAL:
        log.warning("Training on a line-integral potential; every step value costs a quadrature.")

    box = policy.param_box
    w = box.clip(policy.initial_params(np.random.default_rng(cfg.seed)) if w0 is None else np.asarray(w0, float))
    check_dimensions(game, policy, w)
    eval_seed = (cfg.seed, EVAL_STREAM)
    best = _evaluate(game, policy, potential, w, cfg.eval_rollouts, eval_seed)
    best_w, best_value, best_iteration = w.copy(), float(best.mean[0]), 0
    evaluations = [{"iteration": 0, "value": best_value}]
    log.info(f"{game.name}: training {policy.kind} policy, initial value {best_value:.5f}")

    curve, next_index = [], 0
    for iteration in range(1, cfg.iterations + 1):
        trajectories, next_index = collect_batch(
            game, policy, w, std, cfg.batch_size, next_index, stream=(cfg.seed, TRAIN_STREAM)
        )
        try:
            estimate = policy_gradient(game, policy, potential, w, trajectories, std, cfg.baseline)
        except NumericalDomainError as exc:
            raise NumericalDomainError(f"{exc} at iteration {iteration}") from exc

        w, kl = _kl_step(policy, w, estimate.grad, estimate.states, estimate.mean, std, cfg)
        returns = estimate.returns
        stderr = returns.std(ddof=1) / math.sqrt(returns.size) if returns.size > 1 else 0.0
        curve.append({"iteration": iteration, "value": float(returns.mean()), "stderr": float(stderr), "kl": kl})
        log.debug(f"iteration {iteration}: batch value {returns.mean():.5f}, kl {kl:.2e}")

        if iteration % cfg.eval_every == 0 or iteration == cfg.iterations:
            value = float(_evaluate(game, policy, potential, w, cfg.eval_rollouts, eval_seed).mean[0])
            evaluations.append({"iteration": iteration, "value": value})
            if value > best_value:
                best_w, best_value, best_iteration = w.copy(), value, iteration
            log.info(f"{game.name}: iteration {iteration}, value {value:.5f} (best {best_value:.5f})")

    final = _evaluate(game, policy, potential, best_w, cfg.eval_rollouts, (cfg.seed, FINAL_STREAM))
    log.info(f"{game.name}: best iterate {best_iteration}, value {final.mean[0]:.5f} +- {final.stderr[0]:.5f}")
    return SolveResult(
        w=best_w,
        value=float(final.mean[0]),
        stderr=float(final.stderr[0]),
        curve=curve,
        terminated_reason="iterations",
        best_iteration=best_iteration,
        evaluations=evaluations,
    )


@dataclass
class GradientEstimate:
    grad: np.ndarray
    states: np.ndarray
    mean: np.ndarray
    returns: np.ndarray


def collect_batch(game, policy, w, std, batch_size, first_index, stream=0):
    """
    Stochastic rollouts under w totalling at least batch_size steps, seeded
    by rollout_seed(stream, i) from i = first_index on.

    :returns: the trajectories and the next unused rollout index.
    """
    trajectories, steps, index = [], 0, first_index
    while steps < batch_size:
        needed = max(1, math.ceil((batch_size - steps) / game.horizon))
        seeds = [rollout_seed(stream, i) for i in range(index, index + needed)]
        index += needed
        batch = ordered_map(lambda s: rollout(game, policy, w, s, stochastic=True, exploration_std=std), seeds)
        trajectories.extend(batch)
        steps += sum(t.terminated_at for t in batch)
    return trajectories, index


def policy_gradient(game, policy, potential, w, trajectories, std, baseline="time-dependent"):
    """
    Likelihood-ratio estimate of the gradient of the discounted potential
    return, averaged over trajectories, with the given return baseline.
    """
    std = np.broadcast_to(np.asarray(std, dtype=float), (game.action_dim,))
    values = [potential.step_values(t.states[: t.terminated_at], t.actions, t.reward_noise, w) for t in trajectories]
    to_go = [_rewards_to_go(v, game.discount) for v in values]
    advantages = np.concatenate([g - b for g, b in zip(to_go, _baselines(to_go, baseline))])
    states = np.concatenate([t.states[: t.terminated_at] for t in trajectories])
    samples = np.concatenate([t.samples for t in trajectories])
    mean = policy.forward_batch(states, w)
    cotangent = advantages[:, None] * (samples - mean) / std**2
    grad = policy.vjp(states, w, cotangent) / len(trajectories)
    if not np.all(np.isfinite(grad)):
        raise NumericalDomainError(
            f"{game.name}: non-finite policy gradient "
            f"(|advantage| max {np.max(np.abs(advantages)):.3e}, {len(trajectories)} rollouts)"
        )
    return GradientEstimate(grad=grad, states=states, mean=mean, returns=np.array([g[0] for g in to_go]))


def _kl_step(policy, w, grad, states, mean, std, cfg):
    """
    Step along grad sized from a quadratic KL estimate, then backtracked
    until the exact batch-mean KL is within cfg.max_kl.

    :returns: the new parameters and the KL of the accepted step (0 if none).
    """
    scale = float(np.max(np.abs(grad)))
    if scale == 0.0:
        return w, 0.0

    def mean_kl(w_new):
        shift = policy.forward_batch(states, w_new) - mean
        return float(np.mean(np.sum(shift**2 / (2.0 * std**2), axis=1)))

    eps = 1e-6 / scale
    slope = (policy.forward_batch(states, w + eps * grad) - policy.forward_batch(states, w - eps * grad)) / (2 * eps)
    curvature = float(np.mean(np.sum(slope**2 / (2.0 * std**2), axis=1)))
    if curvature <= 0.0:
        return w, 0.0
    eta = math.sqrt(cfg.max_kl / curvature)
    for halving in range(cfg.max_backtracks + 1):
        candidate = policy.param_box.clip(w + eta * grad)
        kl = mean_kl(candidate)
        if kl <= cfg.max_kl:
            if halving:
                log.debug(f"KL step accepted after {halving} halvings")
            return candidate, kl
        eta *= cfg.backtrack_factor
    log.debug(f"No step within max_kl after {cfg.max_backtracks} halvings, keeping parameters")
    return w, 0.0


def backprop_grad(policy, x, w):
    """
    Exact derivatives of every action-mean component with respect to w, shape (A, W).
    """
    return policy.jacobian(np.asarray(x, dtype=float), np.asarray(w, dtype=float))


def fishwar_closed_form(num_agents, alpha, gamma):
    """
    Equilibrium gains of the fish war under linear policies a_k = w_k x:
    w_k = (1 - alpha gamma) / (alpha gamma + N (1 - alpha gamma)).
    """
    if num_agents < 1:
        raise ConfigurationError("num_agents must be at least 1", key="num_agents")
    if not 0.0 < alpha < 1.0:
        raise ConfigurationError(f"alpha must lie in (0, 1), got {alpha}", key="alpha")
    if not 0.0 <= gamma < 1.0:
        raise ConfigurationError(f"gamma must lie in [0, 1), got {gamma}", key="gamma")
    rest = 1.0 - alpha * gamma
    return np.full(num_agents, rest / (alpha * gamma + num_agents * rest))


def project_energy_box(y, delta, upper, budget, iterations=60):
    """
    Euclidean projection of y onto {0 <= a <= upper, sum_t delta_t a_t <= budget}
    along the last axis, by bisection on the multiplier of the budget.
    """
    y = np.asarray(y, dtype=float)
    delta = np.broadcast_to(np.asarray(delta, dtype=float), y.shape)
    budget = np.broadcast_to(np.asarray(budget, dtype=float), y.shape[:-1])
    clipped = np.clip(y, 0.0, upper)
    over = np.sum(delta * clipped, axis=-1) > budget
    if not np.any(over):
        return clipped
    lo = np.zeros(y.shape[:-1])
    hi = np.max(np.maximum(y, 0.0) / delta, axis=-1)
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        spent = np.sum(delta * np.clip(y - mid[..., None] * delta, 0.0, upper), axis=-1)
        above = spent > budget
        lo = np.where(above, mid, lo)
        hi = np.where(above, hi, mid)
    multiplier = np.where(over, hi, 0.0)
    return np.clip(y - multiplier[..., None] * delta, 0.0, upper)


@dataclass
class BaselineResult:
    averaged_value: float
    per_sequence_mean: float
    per_sequence_stderr: float
    iterations: int
    residual: float

    def to_dict(self):
        return {
            "averaged_sequence_value": self.averaged_value,
            "per_sequence_mean": self.per_sequence_mean,
            "per_sequence_stderr": self.per_sequence_stderr,
            "iterations": self.iterations,
            "residual": self.residual,
        }


class _OpenLoopMac:
    """
    Discounted potential of open-loop MAC power schedules a[p, t, k] for
    known fading v[p, t, k] and discharge d[p, t, k].
    """

    def __init__(self, params, fading, discharge):
        self.params = params
        self.gains = np.asarray(params.gains, dtype=float)
        self.fading = fading
        self.discharge = discharge
        horizon = fading.shape[1]
        self.discounts = params.gamma ** np.arange(horizon)
        self.tail = self.discounts.sum() - np.cumsum(self.discounts)
        gv = self.gains * fading
        curvature = np.max(self.discounts[None, :] * np.sum(gv**2, axis=-1), axis=1)
        self.lipschitz = np.where(curvature > 0.0, curvature, 1.0)

    def value(self, a):
        total = np.sum(self.gains * self.fading * a, axis=-1)
        spent = np.cumsum(self.discharge * a, axis=1) - self.discharge * a
        battery = self.params.battery_max - spent
        per_step = np.log1p(total) + self.params.alpha * battery.sum(axis=-1)
        return per_step @ self.discounts

    def gradient(self, a):
        total = np.sum(self.gains * self.fading * a, axis=-1)
        rate = self.discounts[None, :, None] * self.gains * self.fading / (1.0 + total[..., None])
        return rate - self.params.alpha * self.discharge * self.tail[None, :, None]

    def project(self, a):
        per_agent = np.swapaxes(a, 1, 2)
        projected = project_energy_box(
            per_agent, np.swapaxes(self.discharge, 1, 2), self.params.power_max, self.params.battery_max
        )
        return np.swapaxes(projected, 1, 2)


def solve_open_loop_mac(params, fading, discharge, tolerance=1e-6, max_iterations=20000):
    """
    Maximize the discounted potential over open-loop schedules by projected
    gradient ascent with momentum and adaptive restart, for a stack of
    problems at once.

    :returns: (schedules, values, iterations, residual)
    :raises: :class:`~mpg.lib.ConvergenceError` when the gradient-mapping
        residual is still above tolerance after max_iterations.
    """
    problem = _OpenLoopMac(params, fading, discharge)
    step = 1.0 / problem.lipschitz[:, None, None]
    a = np.zeros_like(fading)
    y, momentum, current = a.copy(), np.ones(len(fading)), problem.value(a)
    residual = np.inf
    for iteration in range(1, max_iterations + 1):
        a_next = problem.project(y + step * problem.gradient(y))
        residual = float(np.max(np.abs(a_next - y) / step))
        candidate = problem.value(a_next)
        restart = candidate < current
        momentum_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * momentum**2))
        extrapolation = np.where(restart, 0.0, (momentum - 1.0) / momentum_next)[:, None, None]
        y = a_next + extrapolation * (a_next - a)
        momentum = np.where(restart, 1.0, momentum_next)
        a, current = a_next, candidate
        if residual <= tolerance:
            log.debug(f"Open-loop MAC problems converged after {iteration} iterations")
            return a, problem.value(a), iteration, residual
    raise ConvergenceError(
        f"Open-loop MAC solver stopped at {max_iterations} iterations with residual {residual:.3e}",
        residual=residual,
    )


def deterministic_baseline_mac(params, num_sequences=100, horizon=None, seed=0, tolerance=1e-6, max_iterations=20000):
    """
    Open-loop reference values for the MAC game.

    Draws num_sequences fading/discharge sequences, then solves the
    deterministic problem once on the averaged sequence and once per
    sequence.

    :returns: :class:`BaselineResult`; the per-sequence mean is the
        estimate with perfect foresight and should not fall below the
        averaged-sequence value.
    """
    if num_sequences < 1:
        raise ConfigurationError("num_sequences must be at least 1", key="num_sequences")
    horizon = params.horizon if horizon is None else horizon
    if horizon < 1:
        raise ConfigurationError("horizon must be positive", key="horizon")
    rng = np.random.default_rng(seed)
    shape = (num_sequences, horizon, params.num_agents)
    fading = rng.uniform(*params.fading, size=shape)
    discharge = rng.uniform(*params.discharge, size=shape)
    stacked_fading = np.concatenate([fading.mean(axis=0, keepdims=True), fading])
    stacked_discharge = np.concatenate([discharge.mean(axis=0, keepdims=True), discharge])

    _, values, iterations, residual = solve_open_loop_mac(
        params, stacked_fading, stacked_discharge, tolerance, max_iterations
    )
    per_sequence = values[1:]
    stderr = per_sequence.std(ddof=1) / math.sqrt(num_sequences) if num_sequences > 1 else 0.0
    result = BaselineResult(
        averaged_value=float(values[0]),
        per_sequence_mean=float(per_sequence.mean()),
        per_sequence_stderr=float(stderr),
        iterations=iterations,
        residual=residual,
    )
    log.info(
        f"MAC open-loop baseline: averaged sequence {result.averaged_value:.4f}, "
        f"per sequence {result.per_sequence_mean:.4f} +- {result.per_sequence_stderr:.4f}"
    )
    return result


def write_curve_csv(path, curve):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=CURVE_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in curve:
            writer.writerow({k: repr(float(row[k])) if k != "iteration" else int(row[k]) for k in CURVE_COLUMNS})
    log.debug(f"Wrote {len(curve)} curve rows to {path}")
