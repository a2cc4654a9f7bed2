"""Desk-scale experiment harness: per-stage timing and the time-delay ablation."""

from __future__ import annotations

import csv
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import PlanningError
from .pipeline import run_pipeline
from .qp import kkt_report
from .scenario import PlannerConfig, generate_forest_scenario

STAGE_FIELDS = ("t_mapf", "t_sfc", "t_rsfc", "t_timealloc", "t_opt", "t_scaling", "t_verify")
_TIMING_KEYS = dict(zip(STAGE_FIELDS, ("mapf", "sfc", "rsfc", "timealloc", "optimization", "scaling", "verify")))


@dataclass
class BenchRecord:
    seed: int
    n_agents: int
    radius: float
    delay: bool
    status: str
    stage: str = ""
    reason: str = ""
    t_mapf: float = 0.0
    t_sfc: float = 0.0
    t_rsfc: float = 0.0
    t_timealloc: float = 0.0
    t_opt: float = 0.0
    t_scaling: float = 0.0
    t_verify: float = 0.0
    total: float = 0.0
    cost: float = math.nan
    scale: float = math.nan
    l_max: int = 0
    segments: int = 0
    verified: bool = False
    jump_pos: float = math.nan
    jump_vel: float = math.nan
    jump_acc: float = math.nan
    endpoint_error: float = math.nan
    min_clearance: float = math.nan
    kkt_primal: float = math.nan
    kkt_stationarity: float = math.nan
    kkt_complementarity: float = math.nan

    @property
    def solved(self) -> bool:
        return self.status == "solved"

    def deterministic(self) -> dict:
        """Fields that must repeat exactly for a repeated seed."""
        d = asdict(self)
        for k in (*STAGE_FIELDS, "total"):
            d.pop(k)
        return d


@dataclass(frozen=True)
class TrialSpec:
    seed: int
    n_agents: int
    radius: float = 0.15
    delay: bool = True
    n_pillars: int = 30
    config: PlannerConfig | None = None
    keep_out: float | None = None


def run_trial(spec: TrialSpec) -> BenchRecord:
    """One random forest instance through the full pipeline; failures become records."""
    base = spec.config or PlannerConfig()
    config = replace(base, time_delay=spec.delay)
    rec = BenchRecord(spec.seed, spec.n_agents, spec.radius, spec.delay, "failed")
    try:
        vmap, agents = generate_forest_scenario(
            spec.seed, spec.n_agents, spec.n_pillars, radius=spec.radius, grid_xy=config.grid_xy,
            keep_out=spec.keep_out,
        )
    except PlanningError as exc:
        rec.stage, rec.reason = exc.stage, exc.reason
        return rec
    res = run_pipeline(vmap, agents, config)
    rec.status = res.status
    rec.stage = res.stage or ""
    rec.reason = res.reason or ""
    for f, key in _TIMING_KEYS.items():
        setattr(rec, f, float(res.timings.get(key, 0.0)))
    rec.total = res.total_time
    rec.cost = res.cost
    rec.scale = res.bundle.scale if res.bundle is not None else math.nan
    rec.l_max = res.plan.l_max if res.plan is not None else 0
    rec.segments = res.segments.M if res.segments is not None else 0
    rec.verified = bool(res.report is not None and res.report.passed)
    if res.report is not None:
        rec.jump_pos, rec.jump_vel, rec.jump_acc = (float(j) for j in res.report.max_jump)
        rec.endpoint_error = res.report.max_endpoint_error
        rec.min_clearance = res.report.min_obstacle_clearance
    if res.qp is not None and res.qp.solved:
        kkt = kkt_report(res.problem, res.qp)
        rec.kkt_primal = kkt["primal"]
        rec.kkt_stationarity = kkt["stationarity"]
        rec.kkt_complementarity = max(kkt["complementarity"], kkt["dual_sign"])
    return rec


def run_trials(specs: Sequence[TrialSpec], workers: int = 1) -> list[BenchRecord]:
    """Run trials, concurrently when ``workers > 1``; output follows input order."""
    if workers <= 1 or len(specs) <= 1:
        return [run_trial(s) for s in specs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_trial, specs))


def run_scaling_suite(
    agent_counts: Iterable[int],
    trials: int,
    *,
    seed0: int = 0,
    radius: float = 0.15,
    workers: int = 1,
    config: PlannerConfig | None = None,
) -> list[BenchRecord]:
    counts = list(agent_counts)
    if any(n > 64 for n in counts):
        raise ValueError("agent counts above 64 are outside the desk-scale harness")
    specs = [TrialSpec(seed0 + t, n, radius, True, config=config) for n in counts for t in range(trials)]
    records = run_trials(specs, workers)
    summary = summarize(records)
    opt = [row["mean_t_opt"] for row in summary]
    if any(b < a for a, b in zip(opt, opt[1:])):
        warnings.warn("mean optimization time is not nondecreasing in agent count", RuntimeWarning, stacklevel=2)
    return records


def summarize(records: Sequence[BenchRecord]) -> list[dict]:
    """Per agent count: trial and success counts plus mean stage times over solved trials."""
    rows = []
    for n in sorted({r.n_agents for r in records}):
        group = [r for r in records if r.n_agents == n]
        ok = [r for r in group if r.solved]
        row: dict = {"n_agents": n, "trials": len(group), "solved": len(ok)}
        for f in (*STAGE_FIELDS, "total"):
            row[f"mean_{f}"] = float(np.mean([getattr(r, f) for r in ok])) if ok else math.nan
        row["mean_cost"] = float(np.mean([r.cost for r in ok])) if ok else math.nan
        rows.append(row)
    return rows


def markdown_table(summary: Sequence[dict]) -> str:
    head = ["agents", "solved", "ECBS [s]", "SFC [s]", "RSFC [s]", "opt [s]", "total [s]", "cost"]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for r in summary:
        cells = [
            str(r["n_agents"]),
            f"{r['solved']}/{r['trials']}",
            *(f"{r[k]:.3f}" for k in ("mean_t_mapf", "mean_t_sfc", "mean_t_rsfc", "mean_t_opt", "mean_total")),
            f"{r['mean_cost']:.3f}",
        ]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def write_records_csv(records: Sequence[BenchRecord], path: str | Path) -> None:
    names = [f.name for f in fields(BenchRecord)]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=names)
        w.writeheader()
        for r in records:
            w.writerow(asdict(r))


def run_ablation(
    delay_enabled: bool,
    radii: Sequence[float],
    trials: int,
    *,
    n_agents: int = 16,
    seed0: int = 0,
    workers: int = 1,
    config: PlannerConfig | None = None,
) -> tuple[list[dict], list[BenchRecord]]:
    """Success rate per radius for one variant.

    Every radius sees the same seeds and, through a shared pillar keep-out
    distance, the same maps.
    """
    grid = (config or PlannerConfig()).grid_xy
    keep = max(radii) + grid / 2 if radii else None
    specs = [
        TrialSpec(seed0 + t, n_agents, r, delay_enabled, config=config, keep_out=keep)
        for r in radii
        for t in range(trials)
    ]
    records = run_trials(specs, workers)
    table = []
    for r in radii:
        group = [x for x in records if x.radius == r]
        solved = sum(x.solved for x in group)
        table.append({
            "radius": r,
            "delay": delay_enabled,
            "trials": len(group),
            "solved": solved,
            "rate": solved / len(group) if group else math.nan,
        })
    return table, records


def ablation_markdown(tables: Sequence[Sequence[dict]]) -> str:
    lines = ["| radius [m] | variant | solved | rate |", "|---|---|---|---|"]
    for table in tables:
        for row in table:
            variant = "delay" if row["delay"] else "no delay"
            lines.append(f"| {row['radius']:.2f} | {variant} | {row['solved']}/{row['trials']} | {row['rate']:.2f} |")
    return "\n".join(lines) + "\n"
