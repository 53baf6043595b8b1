import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from mpg.config import build_game, build_policy, load_config
from mpg.environments import MacParams
from mpg.game import evaluation_violations
from mpg.lib import (
    EXIT_FAILURE,
    EXIT_INCONCLUSIVE,
    EXIT_NOINPUT,
    EXIT_NON_MPG,
    EXIT_OK,
    EXIT_SOFTWARE,
    EXIT_USAGE,
    SCHEMA_VERSION,
    ConfigurationError,
    MpgError,
    write_json,
)
from mpg.numdiff import INCONCLUSIVE, MPG, NON_MPG, check_mpg_conditions, sample_check_points
from mpg.potential import (
    declared_potential,
    definition_gap,
    export_grid_csv,
    line_integral_potential,
    max_deviation_up_to_constant,
    potential_consistency_check,
    potential_grid,
)
from mpg.solver import FINAL_STREAM, deterministic_baseline_mac, pg_train, write_curve_csv
from mpg.verifier import nash_deviation_check

log = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)-8s %(name)-20s %(message)s"

VERDICT_EXIT_CODES = {MPG: EXIT_OK, NON_MPG: EXIT_NON_MPG, INCONCLUSIVE: EXIT_INCONCLUSIVE}

# Standard errors of slack allowed above the per-sequence baseline.
UPPER_BOUND_STDERRS = 3.0

MPG_REPORT = "mpg_report.json"
SOLVE_RESULT = "solve_result.json"
CURVE = "curve.csv"
NASH_REPORT = "nash_report.json"
BENCH_REPORT = "bench_mac.json"
POTENTIAL_GRID = "potential_grid.csv"
POTENTIAL_REPORT = "potential_report.json"


class ArgumentParser(argparse.ArgumentParser):
    """Usage errors exit with EXIT_USAGE; exit status 2 means a non-MPG verdict."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser():
    parser = ArgumentParser(prog="mpg", description="Markov potential game toolkit")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    commands = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    def command(name, help_text):
        sub = commands.add_parser(name, help=help_text)
        sub.add_argument("--config", required=True, help="Path to the JSON experiment file.")
        sub.add_argument("--seed", type=int, default=None, help="Override the experiment seed.")
        sub.add_argument("--out", default=None, help="Override the output directory.")
        return sub

    command("check", help_text="Check the potential-game conditions at sampled points.")
    solve = command("solve", help_text="Train a policy on the potential.")
    solve.add_argument("--force", action="store_true", help="Train even when the check finds a violation.")
    verify = command("verify", help_text="Search unilateral deviations from a parameter vector.")
    verify.add_argument("--w-file", default=None, help=f"JSON file with the parameters (default: <out>/{SOLVE_RESULT})")
    command("bench-mac", help_text="Compare a trained MAC policy with the open-loop baselines.")
    command("potential", help_text="Reconstruct the potential and cross-check it against the rewards.")
    return parser


def _output_dir(config):
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _payload(config, command, body):
    payload = {"schema_version": SCHEMA_VERSION, "config_hash": config.hash, "command": command}
    payload.update(body)
    return payload


def _potential_for(config, game, policy):
    if game.decomposition is not None:
        return declared_potential(game, policy, seed=config.seed, cfg=config.check)
    log.warning(f"{game.name} declares no common reward term, falling back to the line-integral potential")
    rng = np.random.default_rng(config.seed)
    base = (game.sample_initial(rng), policy.initial_params(rng))
    return line_integral_potential(game, policy, base, config.potential.quadrature, config.seed, config.check)


def _violations(config, game, policy, w):
    """Constraint violations along the final evaluation rollouts of a trained w."""
    return evaluation_violations(game, policy, w, config.train.eval_rollouts, (config.train.seed, FINAL_STREAM))


def cmd_check(config, args):
    game = build_game(config)
    policy = build_policy(config, game)
    report = check_mpg_conditions(game, policy, config.check)
    path = _output_dir(config) / MPG_REPORT
    write_json(path, _payload(config, "check", report.to_dict()))
    log.info(f"Wrote {path}")
    return VERDICT_EXIT_CODES[report.verdict]


def cmd_solve(config, args):
    game = build_game(config)
    policy = build_policy(config, game)
    out = _output_dir(config)
    report = check_mpg_conditions(game, policy, config.check)
    write_json(out / MPG_REPORT, _payload(config, "check", report.to_dict()))
    if report.verdict == NON_MPG:
        if not args.force:
            log.error(f"{game.name} is not a Markov potential game ({report.statement}); use --force to train anyway")
            return EXIT_NON_MPG
        log.warning(f"Training {game.name} despite a non-MPG verdict")

    potential = _potential_for(config, game, policy)
    result = pg_train(game, policy, potential, config.train)
    body = result.to_dict()
    body.update({"game": game.name, "policy": policy.kind, "verdict": report.verdict})
    body["constraint_violations"] = _violations(config, game, policy, result.w)
    write_json(out / SOLVE_RESULT, _payload(config, "solve", body))
    write_curve_csv(out / CURVE, result.curve)
    log.info(f"Wrote {out / SOLVE_RESULT} and {out / CURVE}")
    return EXIT_OK


def _read_params(path):
    with open(path, encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path} is not valid JSON: {exc}", key="w-file") from exc
    w = payload.get("w") if isinstance(payload, dict) else payload
    if w is None:
        raise ConfigurationError(f"{path} holds no parameter vector 'w'", key="w-file")
    return np.asarray(w, dtype=float)


def cmd_verify(config, args):
    game = build_game(config)
    policy = build_policy(config, game)
    w_file = Path(args.w_file) if args.w_file else Path(config.output_dir) / SOLVE_RESULT
    w = _read_params(w_file)
    verify = config.verify
    report = nash_deviation_check(game, policy, w, verify.budget, verify.seed, verify.restarts, verify.num_rollouts)
    body = report.to_dict()
    body["constraint_violations"] = evaluation_violations(game, policy, w, verify.num_rollouts, verify.seed)
    path = _output_dir(config) / NASH_REPORT
    write_json(path, _payload(config, "verify", body))
    log.info(f"Wrote {path}")
    return EXIT_OK


def cmd_bench_mac(config, args):
    game = build_game(config)
    if not isinstance(game.params, MacParams):
        raise ConfigurationError(f"bench-mac needs a mac environment, got {game.name}", key="environment.name")
    policy = build_policy(config, game)
    potential = _potential_for(config, game, policy)
    trained = pg_train(game, policy, potential, config.train)
    bench = config.bench
    baseline = deterministic_baseline_mac(
        game.params, bench.num_sequences, bench.horizon, config.seed, bench.tolerance, bench.max_iterations
    )
    ratio = trained.value / baseline.averaged_value
    upper_ratio = trained.value / baseline.per_sequence_mean
    # the per-sequence optimum bounds any closed-loop value up to sampling error
    spread = math.hypot(trained.stderr, baseline.per_sequence_stderr)
    upper_bound = 1.0 + UPPER_BOUND_STDERRS * spread / abs(baseline.per_sequence_mean)
    bound_holds = bool(upper_ratio <= upper_bound)
    if not bound_holds:
        log.warning(f"Trained value is {upper_ratio:.4f} of the per-sequence baseline, above {upper_bound:.4f}")
    body = {
        "game": game.name,
        "policy": policy.kind,
        "trained_value": trained.value,
        "trained_stderr": trained.stderr,
        "constraint_violations": _violations(config, game, policy, trained.w),
        "baseline": baseline.to_dict(),
        "ratio": ratio,
        "ratio_to_per_sequence": upper_ratio,
        "per_sequence_bound": upper_bound,
        "per_sequence_bound_holds": bound_holds,
        "acceptance_ratio": bench.acceptance_ratio,
        "accepted": ratio >= bench.acceptance_ratio,
    }
    out = _output_dir(config)
    write_json(out / BENCH_REPORT, _payload(config, "bench-mac", body))
    write_curve_csv(out / CURVE, trained.curve)
    if ratio < bench.acceptance_ratio:
        log.error(f"Trained value is {ratio:.4f} of the averaged-sequence baseline, below {bench.acceptance_ratio}")
        return EXIT_FAILURE
    log.info(f"Trained value is {ratio:.4f} of the averaged-sequence baseline")
    return EXIT_OK


def cmd_potential(config, args):
    game = build_game(config)
    policy = build_policy(config, game)
    rng = np.random.default_rng(config.seed)
    base = (game.sample_initial(rng), policy.initial_params(rng))
    state_dim = game.state_dim
    targets = [(z[:state_dim], z[state_dim:]) for z in sample_check_points(game, policy, config.check)]
    declared = declared_potential(game, policy, config.seed, config.check) if game.decomposition else None
    settings = config.potential
    rows = potential_grid(game, policy, base, targets, settings.quadrature, config.seed, config.check, declared)
    out = _output_dir(config)
    export_grid_csv(out / POTENTIAL_GRID, rows)

    potential = declared or line_integral_potential(game, policy, base, settings.quadrature, config.seed, config.check)
    body = {
        "game": game.name,
        "policy": policy.kind,
        "consistency": potential_consistency_check(game, policy, potential, config.check),
    }
    if declared is not None:
        line = [row["line_integral"] for row in rows]
        body["declared_deviation"] = max_deviation_up_to_constant(line, [row["declared"] for row in rows])
        body["definition_gap"] = definition_gap(
            game, policy, declared, base[1], settings.num_deviations, seed=config.seed
        )
    write_json(out / POTENTIAL_REPORT, _payload(config, "potential", body))
    log.info(f"Wrote {out / POTENTIAL_GRID} and {out / POTENTIAL_REPORT}")
    return EXIT_OK


COMMANDS = {
    "check": cmd_check,
    "solve": cmd_solve,
    "verify": cmd_verify,
    "bench-mac": cmd_bench_mac,
    "potential": cmd_potential,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format=LOG_FORMAT)
    try:
        config = load_config(args.config).with_overrides(seed=args.seed, output_dir=args.out)
        log.info(f"Running {args.command} on {args.config} (config {config.hash[:12]})")
        return COMMANDS[args.command](config, args)
    except FileNotFoundError as exc:
        log.error(f"Missing input file: {exc.filename}")
        return EXIT_NOINPUT
    except ConfigurationError as exc:
        log.error(f"Configuration error: {exc}")
        return EXIT_USAGE
    except MpgError as exc:
        log.error(f"{type(exc).__name__}: {exc}")
        return EXIT_SOFTWARE
    except Exception:
        log.exception(f"Unexpected failure while running {args.command}")
        return EXIT_SOFTWARE
