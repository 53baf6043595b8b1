"""
Experiment files: one JSON document per experiment, parsed into frozen
dataclasses. Unknown keys are rejected at every level.
"""
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from mpg.environments import build_environment
from mpg.lib import ConfigurationError, config_hash
from mpg.numdiff import FdConfig
from mpg.policy import ConstantPolicy, LinearPolicy, MlpPolicy
from mpg.solver import TrainConfig

log = logging.getLogger(__name__)

POLICY_KINDS = ("linear", "mlp", "tabular-constant")

# Default exploration std, as a fraction of the action box width at the
# initial state; unbounded actions get the fraction itself.
EXPLORATION_FRACTION = 0.05


@dataclass(frozen=True)
class EnvironmentConfig:
    name: str = "fishwar"
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class PolicyConfig:
    """
    :param param_box: [lower, upper] applied to every parameter; linear
        policies default to the game's gain range, the others to no bounds.
    :param init: starting value of every linear or constant parameter.
    """

    kind: str = "linear"
    hidden: tuple = (32, 32, 32)
    log_std: float = math.log(0.1)
    init: float = None
    param_box: tuple = None
    exploration_std: float = None

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ConfigurationError(f"policy kind must be one of {POLICY_KINDS}, got {self.kind!r}", key="kind")
        object.__setattr__(self, "hidden", tuple(self.hidden))
        if self.param_box is not None:
            if len(self.param_box) != 2:
                raise ConfigurationError("param_box must be a [lower, upper] pair", key="param_box")
            object.__setattr__(self, "param_box", tuple(float(v) for v in self.param_box))
        if self.exploration_std is not None and not self.exploration_std > 0.0:
            raise ConfigurationError("exploration_std must be positive", key="exploration_std")


@dataclass(frozen=True)
class VerifyConfig:
    budget: int = 200
    restarts: int = 5
    num_rollouts: int = 20
    seed: int = 0


@dataclass(frozen=True)
class PotentialConfig:
    quadrature: int = 256
    num_deviations: int = 4


@dataclass(frozen=True)
class BenchConfig:
    num_sequences: int = 100
    horizon: int = None
    tolerance: float = 1e-6
    max_iterations: int = 20000
    acceptance_ratio: float = 0.95


@dataclass(frozen=True)
class ExperimentConfig:
    environment: EnvironmentConfig = field(default_factory=EnvironmentConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    check: FdConfig = field(default_factory=FdConfig)
    verify: VerifyConfig = field(default_factory=VerifyConfig)
    potential: PotentialConfig = field(default_factory=PotentialConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    output_dir: str = "results"
    seed: int = 0

    def with_overrides(self, seed=None, output_dir=None):
        config = self
        if output_dir is not None:
            config = dataclasses.replace(config, output_dir=output_dir)
        if seed is not None:
            config = _seeded(config, seed)
        return config

    def to_dict(self):
        return dataclasses.asdict(self)

    @property
    def hash(self):
        # where results land does not change what they are
        content = self.to_dict()
        content.pop("output_dir")
        return config_hash(content)


SECTIONS = {
    "environment": EnvironmentConfig,
    "policy": PolicyConfig,
    "train": TrainConfig,
    "check": FdConfig,
    "verify": VerifyConfig,
    "potential": PotentialConfig,
    "bench": BenchConfig,
}


def _build(cls, payload, section):
    if not isinstance(payload, dict):
        raise ConfigurationError(f"Section {section!r} must be an object", key=section)
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(payload) - known)
    if unknown:
        raise ConfigurationError(f"Unknown key {section}.{unknown[0]}", key=f"{section}.{unknown[0]}")
    try:
        return cls(**payload)
    except TypeError as exc:
        raise ConfigurationError(f"Invalid {section} section: {exc}", key=section) from exc


def _seeded(config, seed):
    """Propagate the experiment seed to every seeded component."""
    return dataclasses.replace(
        config,
        seed=seed,
        train=dataclasses.replace(config.train, seed=seed),
        check=dataclasses.replace(config.check, base_seed=seed),
        verify=dataclasses.replace(config.verify, seed=seed),
    )


def parse_config(payload):
    if not isinstance(payload, dict):
        raise ConfigurationError("Experiment file must hold a JSON object")
    known = set(SECTIONS) | {"output_dir", "seed"}
    unknown = sorted(set(payload) - known)
    if unknown:
        raise ConfigurationError(f"Unknown key {unknown[0]}", key=unknown[0])
    sections = {name: _build(cls, payload.get(name, {}), name) for name, cls in SECTIONS.items()}
    seed = payload.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigurationError("seed must be a non-negative integer", key="seed")
    config = ExperimentConfig(output_dir=str(payload.get("output_dir", "results")), **sections)
    return _seeded(config, seed)


def load_config(path):
    """
    :raises:
        ``FileNotFoundError`` when path does not exist and
        :class:`~mpg.lib.ConfigurationError` when it is not a valid experiment.
    """
    with open(path, encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path} is not valid JSON: {exc}") from exc
    config = parse_config(payload)
    log.debug(f"Loaded experiment {path} ({config.environment.name}, {config.policy.kind} policy)")
    return config


def build_game(config):
    return build_environment(config.environment.name, config.environment.params)


def default_exploration_std(game):
    width = game.action_bounds(game.sample_initial(np.random.default_rng(0))).width
    usable = np.isfinite(width) & (width > 0.0)
    return np.where(usable, EXPLORATION_FRACTION * np.where(usable, width, 0.0), EXPLORATION_FRACTION)


def build_policy(config, game):
    """Policy family named by the experiment, sized for game."""
    settings = config.policy
    if settings.kind == "mlp":
        policy = MlpPolicy(game.policy_indices, game.action_dims, settings.hidden, settings.log_std, settings.param_box)
        if settings.exploration_std is not None:
            policy.with_exploration(settings.exploration_std)
        return policy

    std = default_exploration_std(game) if settings.exploration_std is None else settings.exploration_std
    param_box = settings.param_box
    if settings.kind == "linear":
        param_box = param_box if param_box is not None else game.linear_gain_box
    init = settings.init
    if init is None:
        lower, upper = param_box if param_box is not None else (-math.inf, math.inf)
        init = lower + 0.5 * (upper - lower) / game.num_agents if np.isfinite(upper - lower) else 0.0
    if settings.kind == "linear":
        return LinearPolicy(game.policy_indices, game.action_dims, param_box, std, init)
    return ConstantPolicy(game.action_dims, param_box, std, init)
