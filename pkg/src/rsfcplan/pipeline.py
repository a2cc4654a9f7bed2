"""End-to-end planner: grid search, corridors, knot allocation, QP, scaling, verification."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import PlanningError
from .mapf import DiscretePlan, GridGraph, plan_discrete
from .postprocess import (
    TrajectoryBundle,
    VerificationReport,
    plan_document,
    time_scale,
    verify,
    write_csv,
    write_plan_json,
)
from .qp import QPProblem, assemble, solve
from .rsfc import RsfcSequence, build_all_rsfc
from .scenario import AgentSpec, PlannerConfig, VoxelMap
from .sfc import CorridorSequence, build_all_sfc
from .solver import QPResult, SolverSettings
from .timealloc import TimeSegments, allocate

STAGES = ("mapf", "sfc", "rsfc", "timealloc", "optimization", "scaling", "verify")


@dataclass
class PipelineResult:
    status: str  # "solved", "infeasible", "failed"
    stage: str | None = None
    reason: str | None = None
    message: str = ""
    timings: dict[str, float] = field(default_factory=dict)
    plan: DiscretePlan | None = None
    sfcs: list[CorridorSequence] | None = None
    rsfcs: dict[tuple[int, int], RsfcSequence] | None = None
    segments: TimeSegments | None = None
    problem: QPProblem | None = None
    qp: QPResult | None = None
    bundle: TrajectoryBundle | None = None
    report: VerificationReport | None = None

    @property
    def ok(self) -> bool:
        return self.status == "solved"

    @property
    def total_time(self) -> float:
        return float(sum(self.timings.values()))

    @property
    def cost(self) -> float:
        if self.problem is None or self.qp is None or self.status != "solved":
            return float("nan")
        return self.problem.cost(self.qp.x)

    def solver_stats(self) -> dict:
        if self.qp is None:
            return {}
        return {
            "status": self.qp.status,
            "iterations": self.qp.iterations,
            "primal_residual": self.qp.prim_res,
            "dual_residual": self.qp.dual_res,
            "objective": self.cost,
            "polished": self.qp.polished,
            "wall_time": self.qp.wall_time,
            "n_vars": self.problem.n_vars if self.problem else 0,
            "segments": self.problem.n_segments if self.problem else 0,
        }

    def summary(self) -> dict:
        return {
            "status": self.status,
            "stage": self.stage,
            "reason": self.reason,
            "message": self.message,
            "timings": self.timings,
            "l_max": self.plan.l_max if self.plan else None,
            "segments": self.segments.M if self.segments else None,
            "cost": self.cost,
            "scale": self.bundle.scale if self.bundle else None,
        }


def _pad_min_length(plan: DiscretePlan, n: int = 2) -> DiscretePlan:
    if plan.l_max >= n:
        return plan
    extra = n - plan.l_max
    way = np.concatenate([plan.waypoints, np.repeat(plan.waypoints[:, -1:], extra, axis=1)], axis=1)
    nodes = np.concatenate([plan.nodes, np.repeat(plan.nodes[:, -1:], extra, axis=1)], axis=1)
    return replace(plan, waypoints=way, nodes=nodes)


def run_pipeline(
    vmap: VoxelMap,
    agents: Sequence[AgentSpec],
    config: PlannerConfig,
    *,
    solver_settings: SolverSettings | None = None,
    discrete_only: bool = False,
    graph: GridGraph | None = None,
) -> PipelineResult:
    """Run every stage; failures are reported in the result, never raised."""
    res = PipelineResult(status="failed")
    settings = solver_settings or SolverSettings(eps_abs=config.qp_eps, eps_rel=config.qp_eps, max_iter=config.qp_max_iter)
    stage = "mapf"
    clock = time.perf_counter()

    def tick(name: str) -> None:
        nonlocal clock
        now = time.perf_counter()
        res.timings[name] = now - clock
        clock = now

    try:
        res.plan = _pad_min_length(plan_discrete(vmap, agents, config, graph))
        tick("mapf")
        if discrete_only:
            res.status = "solved"
            return res
        stage = "sfc"
        res.sfcs = build_all_sfc(vmap, res.plan, config)
        tick("sfc")
        stage = "rsfc"
        res.rsfcs = build_all_rsfc(res.plan, config)
        tick("rsfc")
        stage = "timealloc"
        res.segments = allocate(
            res.plan.waypoints, [a.id for a in agents], res.sfcs, res.rsfcs, config.t_step, config.time_delay
        )
        tick("timealloc")
        stage = "optimization"
        res.problem = assemble(agents, res.sfcs, res.rsfcs, res.segments, config)
        res.qp = solve(res.problem, settings)
        tick("optimization")
        if not res.qp.solved:
            res.status, res.stage, res.reason = "infeasible", "optimization", res.qp.status
            res.message = f"QP {res.qp.status} after {res.qp.iterations} iterations"
            return res
        stage = "scaling"
        raw = TrajectoryBundle(list(agents), res.segments.knots, res.problem.controls(res.qp.x))
        res.bundle = time_scale(raw, config.v_max, config.a_max, config.sample_dt, config.scale_margin)
        tick("scaling")
        stage = "verify"
        res.report = verify(res.bundle, vmap, agents, config)
        tick("verify")
        if not res.report.passed:
            first = res.report.first() or {}
            res.status, res.stage, res.reason = "failed", "verify", first.get("kind", "violation")
            res.message = f"verifier rejected the plan: {first}"
            return res
        res.status = "solved"
    except PlanningError as exc:
        tick(stage)
        res.status = "failed" if exc.stage in ("input",) else "infeasible"
        res.stage, res.reason, res.message = exc.stage if exc.stage != "unknown" else stage, exc.reason, str(exc)
    return res


def _dump(path: Path, payload) -> Path:
    path.write_text(json.dumps(payload, indent=1, sort_keys=True), encoding="utf-8")
    return path


def write_artifacts(
    result: PipelineResult,
    config: PlannerConfig,
    out_dir: str | Path,
    *,
    dump_sfc: bool = False,
    dump_rsfc: bool = False,
    dump_plan: bool = False,
) -> dict[str, Path]:
    """Write ``report.json`` always; plan JSON, CSV and requested dumps when available."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: dict[str, Path] = {}
    report = result.summary()
    report["solver"] = result.solver_stats()
    if result.report is not None:
        report["verification"] = result.report.to_dict()
    written["report"] = _dump(out / "report.json", report)
    if result.plan is not None and (dump_plan or result.sfcs is None):
        written["discrete"] = _dump(out / "discrete_plan.json", result.plan.to_dict())
    if dump_sfc and result.sfcs is not None:
        written["sfc"] = _dump(out / "sfc.json", [c.to_dict() for c in result.sfcs])
    if dump_rsfc and result.rsfcs is not None:
        written["rsfc"] = _dump(out / "rsfc.json", [r.to_dict() for r in result.rsfcs.values()])
    if dump_plan and result.segments is not None:
        written["segments"] = _dump(out / "segments.json", result.segments.to_dict())
    if result.ok and result.bundle is not None:
        corridors = [c.to_dict() for c in result.sfcs] if result.sfcs is not None else None
        doc = plan_document(
            result.bundle,
            config,
            result.solver_stats(),
            corridors,
            {"timings": result.timings, "verification": result.report.to_dict() if result.report else None},
        )
        write_plan_json(out / "plan.json", doc)
        written["plan"] = out / "plan.json"
        write_csv(result.bundle, out / "trajectories.csv", config.sample_dt)
        written["csv"] = out / "trajectories.csv"
    return written
