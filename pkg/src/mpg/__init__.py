from .environments import make_cooperative, make_fishwar, make_mac, make_non_mpg_counterexample
from .game import GameSpec, mc_return, rollout
from .numdiff import check_mpg_conditions
from .potential import declared_potential, potential_line_integral
from .solver import pg_train
from .verifier import nash_deviation_check

__all__ = [
    "GameSpec",
    "check_mpg_conditions",
    "declared_potential",
    "make_cooperative",
    "make_fishwar",
    "make_mac",
    "make_non_mpg_counterexample",
    "mc_return",
    "nash_deviation_check",
    "pg_train",
    "potential_line_integral",
    "rollout",
]
