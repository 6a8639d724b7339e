"""Monte Carlo runs, per-bucket aggregation and result files."""

from __future__ import annotations

import csv
import json
import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

from . import __version__
from .cfg import (CoalitionStructure, OperatorGame, gamma_core_exact, run_cfg,
                  run_non_cooperative, run_variant_merge_only)
from .scenario import ScenarioConfig, generate_scenario, sub_seeds


class ExperimentError(RuntimeError):
    pass


@dataclass(frozen=True)
class MetricsRecord:
    run_id: int
    seed: int
    mode: str
    devices: int
    aggregate_utility: float
    utilities: tuple[tuple[int, float], ...]
    cgg_iterations: tuple[int, ...]
    cfg_rounds: int | None
    structure: str
    core_size: int | None = None

    @property
    def max_cgg_iterations(self) -> int:
        return max(self.cgg_iterations, default=0)

    def check(self) -> None:
        total = math.fsum(u for _, u in self.utilities)
        if abs(total - self.aggregate_utility) > 1e-6 * max(1.0, abs(total)):
            raise ExperimentError(f"run {self.run_id}: aggregate {self.aggregate_utility} != sum {total}")


RECORD_COLUMNS = ("run_id", "seed", "mode", "devices", "aggregate_utility", "utilities",
                  "cgg_iterations", "max_cgg_iterations", "cfg_rounds", "structure", "core_size")
SUMMARY_COLUMNS = ("devices", "mode", "runs", "mean_iters", "max_iters", "sd_iters",
                   "mean_utility", "max_utility", "sd_utility")


def run_once(config: ScenarioConfig, run_id: int) -> MetricsRecord:
    seed = config.base_seed + run_id
    try:
        return _run(config, run_id, seed)
    except Exception as exc:
        raise ExperimentError(f"run {run_id} (seed {seed}): {exc}") from exc


def _run(config: ScenarioConfig, run_id: int, seed: int) -> MetricsRecord:
    instance = generate_scenario(config, seed)
    play = sub_seeds(seed)["play"]
    game = OperatorGame(instance, config.econ, play)
    rounds = core_size = None
    if config.layer == "device":
        outcome = game.evaluate(CoalitionStructure((tuple(instance.operator_ids),)))
    elif config.mode == "lcg":
        result = run_cfg(instance, config.econ, play, game=game)
        outcome, rounds = result.outcome, result.rounds
    elif config.mode == "lcg-variant":
        outcome = run_variant_merge_only(instance, config.econ, play, game=game)
    elif config.mode == "non-coop":
        outcome = run_non_cooperative(instance, config.econ, play, game=game)
    else:
        core = gamma_core_exact(instance, config.econ, play, optimistic=not config.pessimistic, game=game)
        core_size = len(core)
        if not core:
            outcome = game.evaluate(CoalitionStructure.singletons(instance.operator_ids))
        else:
            # report the best core outcome; ties go to the first structure in canonical order
            outcome = max(core, key=lambda o: (o.aggregate, [-len(c) for c in o.structure.coalitions]))
    record = MetricsRecord(
        run_id=run_id, seed=seed, mode=config.mode if config.layer == "both" else "device-layer",
        devices=len(instance.devices), aggregate_utility=outcome.aggregate, utilities=outcome.utilities,
        cgg_iterations=tuple(r.iterations for r in game.cgg_runs), cfg_rounds=rounds,
        structure=str(outcome.structure), core_size=core_size)
    record.check()
    return record


def run_experiment(config: ScenarioConfig, workers: int = 1) -> list[MetricsRecord]:
    """One record per run, ordered by run id."""
    ids = range(config.runs)
    if workers <= 1:
        return [run_once(config, r) for r in ids]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_once, [config] * config.runs, ids, chunksize=4))


def run_sweep(config: ScenarioConfig, per_operator: Iterable[int], workers: int = 1) -> list[MetricsRecord]:
    records = []
    for m in per_operator:
        records += run_experiment(config.with_devices(m), workers)
    return records


def aggregate_metrics(records: Sequence[MetricsRecord], group_by: str | Sequence[str] = ("devices", "mode")) -> list[dict]:
    """Mean, max and population standard deviation of iterations and utilities per group."""
    if not records:
        raise ExperimentError("no records to aggregate")
    keys = (group_by,) if isinstance(group_by, str) else tuple(group_by)
    groups: dict[tuple, list[MetricsRecord]] = {}
    for rec in records:
        groups.setdefault(tuple(getattr(rec, k) for k in keys), []).append(rec)
    rows = []
    for key in sorted(groups):
        recs = groups[key]
        its = [r.max_cgg_iterations for r in recs]
        us = [r.aggregate_utility for r in recs]
        row = dict(zip(keys, key))
        row.update(runs=len(recs), mean_iters=statistics.fmean(its), max_iters=max(its),
                   sd_iters=statistics.pstdev(its), mean_utility=statistics.fmean(us),
                   max_utility=max(us), sd_utility=statistics.pstdev(us))
        rows.append(row)
    return rows


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if value is None:
        return ""
    return str(value)


def record_row(rec: MetricsRecord) -> list[str]:
    return [str(rec.run_id), str(rec.seed), rec.mode, str(rec.devices), _fmt(rec.aggregate_utility),
            ";".join(f"{h}:{u!r}" for h, u in rec.utilities),
            ";".join(map(str, rec.cgg_iterations)), str(rec.max_cgg_iterations),
            _fmt(rec.cfg_rounds), rec.structure, _fmt(rec.core_size)]


def write_outputs(out_dir: str | Path, config: ScenarioConfig, records: Sequence[MetricsRecord],
                  command: str, extra: dict | None = None) -> dict[str, Path]:
    """Write records.csv, summary.csv and manifest.json; contents depend only on the inputs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"records": out / "records.csv", "summary": out / "summary.csv", "manifest": out / "manifest.json"}
    with open(paths["records"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECORD_COLUMNS)
        w.writerows(record_row(r) for r in records)
    with open(paths["summary"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for row in aggregate_metrics(records):
            w.writerow([_fmt(row[c]) for c in SUMMARY_COLUMNS])
    manifest = {"software": "lcgsim", "version": __version__, "command": command,
                "config": config.to_dict(), "records": len(records),
                "files": {k: p.name for k, p in paths.items() if k != "manifest"}}
    manifest.update(extra or {})
    with open(paths["manifest"], "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return paths


def for_mode(config: ScenarioConfig, mode: str) -> ScenarioConfig:
    return replace(config, mode=mode)
