"""Command-line entry point: ``sim run``, ``sim sweep`` and ``sim verify``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from .cfg import MAX_EXACT_OPERATORS, CoreSolver, OperatorGame, ResidualGame, run_cfg
from .cgg import run_cgg, verify_nash
from .experiment import ExperimentError, aggregate_metrics, run_experiment, run_sweep, write_outputs
from .netmodel import adjacency
from .routing import FeasibilityError, audit_assignment
from .scenario import MODES, ScenarioError, generate_scenario, load_config, sub_seeds

log = logging.getLogger("lcgsim")


def _range(text: str) -> list[int]:
    lo, sep, hi = text.partition("..")
    try:
        return list(range(int(lo), int(hi if sep else lo) + 1))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected N or A..B, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sim", description="Layered coalitional game simulator for D2D relaying.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Monte Carlo runs of one configuration")
    sweep = sub.add_parser("sweep", help="repeat runs over devices per operator")
    for sp in (run, sweep):
        sp.add_argument("--config", required=True)
        sp.add_argument("--mode", choices=MODES)
        sp.add_argument("--seed", type=int, help="base seed (overrides the config)")
        sp.add_argument("--runs", type=int)
        sp.add_argument("--out", default="results")
        sp.add_argument("--workers", type=int, default=1)
    sweep.add_argument("--devices", type=_range, required=True, help="devices per operator, e.g. 3..8")

    verify = sub.add_parser("verify", help="audit every invariant on one instance")
    verify.add_argument("--config", required=True)
    verify.add_argument("--seed", type=int)
    return p


def _config(args):
    config = load_config(args.config)
    changes = {}
    if getattr(args, "mode", None):
        changes["mode"] = args.mode
    if args.seed is not None:
        changes["base_seed"] = args.seed
    if getattr(args, "runs", None):
        changes["runs"] = args.runs
    return replace(config, **changes)


def cmd_run(args) -> int:
    config = _config(args)
    records = run_experiment(config, args.workers)
    paths = write_outputs(args.out, config, records, "run")
    _print_summary(records)
    log.info("wrote %s", ", ".join(str(p) for p in paths.values()))
    return 0


def cmd_sweep(args) -> int:
    config = _config(args)
    records = run_sweep(config, args.devices, args.workers)
    paths = write_outputs(args.out, config, records, "sweep", {"devices_per_operator": args.devices})
    _print_summary(records)
    log.info("wrote %s", ", ".join(str(p) for p in paths.values()))
    return 0


def _print_summary(records) -> None:
    print(f"{'devices':>7} {'mode':>12} {'runs':>5} {'mean_iters':>10} {'max_iters':>9} {'mean_utility':>12}")
    for row in aggregate_metrics(records):
        print(f"{row['devices']:>7} {row['mode']:>12} {row['runs']:>5} {row['mean_iters']:>10.3f} "
              f"{row['max_iters']:>9} {row['mean_utility']:>12.2f}")


def cmd_verify(args) -> int:
    """Run the audits on the instance of the base seed; return the number of failures."""
    config = _config(args)
    seed = config.base_seed
    instance = generate_scenario(config, seed)
    play = sub_seeds(seed)["play"]
    failures = 0

    def report(name, ok, detail=""):
        nonlocal failures
        failures += not ok
        print(f"{'ok  ' if ok else 'FAIL'} {name}{': ' + detail if detail else ''}")

    grand = [instance.operator_ids]
    adj = adjacency(instance, grand)
    report("adjacency symmetric", all(i in adj[j] for i in adj for j in adj[i]))
    res = run_cgg(instance, grand, play)
    try:
        audit_assignment(res.game.graph(res.state.edges), instance.flows, res.assignment)
        report("routing feasibility", True)
    except FeasibilityError as exc:
        report("routing feasibility", False, str(exc))
    ok, witness = verify_nash(res.state, instance, game=res.game)
    report("Nash network", ok, "" if ok else f"device {witness[0]} gains by {witness[1]}")

    game = OperatorGame(instance, config.econ, play)
    cfg = run_cfg(instance, config.econ, play, game=game)
    x = cfg.outcome.x
    report("formation terminated", True, f"{cfg.rounds} rounds, final {cfg.outcome.structure}")
    report("aggregate equals sum", abs(cfg.outcome.aggregate - sum(x.values())) <= 1e-6 * max(1, abs(sum(x.values()))))
    if len(instance.operator_ids) <= MAX_EXACT_OPERATORS:
        solver = CoreSolver(game, optimistic=not config.pessimistic)
        dev = solver.find_deviation(cfg.outcome, ResidualGame(frozenset(instance.operator_ids)))
        report("final outcome undominated", dev is None,
               "" if dev is None else f"{sorted(dev.coalition)} deviate to {dev.deviator_structure}")
    else:
        print(f"skip final outcome undominated (exhaustive check needs at most {MAX_EXACT_OPERATORS} operators)")
    print(f"{failures} failure(s)")
    return failures


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "run":
            return cmd_run(args)
        if args.command == "sweep":
            return cmd_sweep(args)
        return 1 if cmd_verify(args) else 0
    except (ScenarioError, ExperimentError, FeasibilityError, OSError) as exc:
        print(f"sim: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
