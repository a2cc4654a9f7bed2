"""Command-line entry point: ``plan``, ``verify``, ``plot``, ``bench``, ``generate``.

Exit codes: 0 success, 2 infeasible or unsolved, 3 invalid input, 4 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from .errors import PlanningError, ScenarioError
from .scenario import PlannerConfig, VoxelMap, generate_forest_scenario, load_scenario, read_json, write_scenario

EXIT_OK = 0
EXIT_UNSOLVED = 2
EXIT_INPUT = 3
EXIT_INTERNAL = 4

log = logging.getLogger("rsfcplan")


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rsfcplan", description="Multi-quadrotor trajectory planning on voxel maps.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    pl = sub.add_parser("plan", help="plan trajectories for a scenario")
    pl.add_argument("map")
    pl.add_argument("scenario")
    pl.add_argument("--out-dir", default="out")
    pl.add_argument("--dump-sfc", action="store_true")
    pl.add_argument("--dump-rsfc", action="store_true")
    pl.add_argument("--dump-plan", action="store_true")
    pl.add_argument("--discrete-only", action="store_true")
    pl.add_argument("--no-delay", action="store_true", help="disable the relative-corridor time delay")
    pl.add_argument("--mapf-budget", type=int)
    pl.add_argument("--qp-tol", type=float)
    pl.add_argument("--qp-max-iter", type=int)
    pl.add_argument("--svg", action="store_true", help="also write plan.svg")

    ve = sub.add_parser("verify", help="re-check a plan JSON against a map")
    ve.add_argument("plan")
    ve.add_argument("map")

    pt = sub.add_parser("plot", help="render a plan JSON as SVG")
    pt.add_argument("plan")
    pt.add_argument("map")
    pt.add_argument("out_svg")
    pt.add_argument("--no-corridors", action="store_true")

    be = sub.add_parser("bench", help="desk-scale experiments")
    bsub = be.add_subparsers(dest="suite", required=True)
    sc = bsub.add_parser("scaling")
    sc.add_argument("--counts", type=_ints, default=[4, 8, 16])
    sc.add_argument("--trials", type=int, default=30)
    sc.add_argument("--out", default="results.csv")
    ab = bsub.add_parser("ablation")
    ab.add_argument("--radii", type=_floats, default=[0.15, 0.2, 0.25, 0.3])
    ab.add_argument("--trials", type=int, default=50)
    ab.add_argument("--agents", type=int, default=16)
    ab.add_argument("--out", default="ablation.csv")
    for q in (sc, ab):
        q.add_argument("--seed", type=int, default=0, help="first trial seed")
        q.add_argument("--workers", type=int, default=1)

    ge = sub.add_parser("generate", help="write a random forest map and scenario")
    ge.add_argument("--seed", type=int, default=0)
    ge.add_argument("--agents", type=int, default=16)
    ge.add_argument("--pillars", type=int, default=30)
    ge.add_argument("--radius", type=float, default=0.15)
    ge.add_argument("--out-dir", default=".")
    return p


def _config_overrides(config: PlannerConfig, args: argparse.Namespace) -> PlannerConfig:
    changes = {}
    if args.mapf_budget is not None:
        changes["mapf_budget"] = args.mapf_budget
    if args.qp_tol is not None:
        changes["qp_eps"] = args.qp_tol
    if args.qp_max_iter is not None:
        changes["qp_max_iter"] = args.qp_max_iter
    if args.no_delay:
        changes["time_delay"] = False
    return replace(config, **changes) if changes else config


def cmd_plan(args: argparse.Namespace) -> int:
    from .pipeline import run_pipeline, write_artifacts
    from .postprocess import render_svg

    vmap, agents, config = load_scenario(args.map, args.scenario)
    config = _config_overrides(config, args)
    res = run_pipeline(vmap, agents, config, discrete_only=args.discrete_only)
    written = write_artifacts(
        res, config, args.out_dir, dump_sfc=args.dump_sfc, dump_rsfc=args.dump_rsfc, dump_plan=args.dump_plan
    )
    if args.svg and res.ok and res.bundle is not None:
        svg = render_svg(vmap, res.bundle, [c.to_dict() for c in res.sfcs or []])
        (Path(args.out_dir) / "plan.svg").write_text(svg, encoding="utf-8")
    line = {"status": res.status, "stage": res.stage, "reason": res.reason, "outputs": sorted(written)}
    print(json.dumps(line))
    if res.ok:
        return EXIT_OK
    if res.stage == "input":
        return EXIT_INPUT
    return EXIT_UNSOLVED


def _load_plan(path: str):
    from .postprocess import read_plan_json

    try:
        return read_plan_json(path)
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ScenarioError("bad_plan", f"{path}: {exc}") from exc


def cmd_verify(args: argparse.Namespace) -> int:
    from .postprocess import verify

    bundle, config, _ = _load_plan(args.plan)
    vmap = VoxelMap.from_dict(read_json(args.map))
    report = verify(bundle, vmap, bundle.agents, config)
    print(json.dumps(report.to_dict(), indent=1))
    return EXIT_OK if report.passed else EXIT_UNSOLVED


def cmd_plot(args: argparse.Namespace) -> int:
    from .postprocess import render_svg

    bundle, _, doc = _load_plan(args.plan)
    vmap = VoxelMap.from_dict(read_json(args.map))
    corridors = None if args.no_corridors else doc.get("corridors")
    Path(args.out_svg).write_text(render_svg(vmap, bundle, corridors), encoding="utf-8")
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    from . import bench

    out = Path(args.out)
    if args.suite == "scaling":
        records = bench.run_scaling_suite(args.counts, args.trials, seed0=args.seed, workers=args.workers)
        bench.write_records_csv(records, out)
        table = bench.markdown_table(bench.summarize(records))
    else:
        tables, records = [], []
        for delay in (True, False):
            t, r = bench.run_ablation(delay, args.radii, args.trials, n_agents=args.agents, seed0=args.seed,
                                      workers=args.workers)
            tables.append(t)
            records += r
        bench.write_records_csv(records, out)
        table = bench.ablation_markdown(tables)
    out.with_suffix(".md").write_text(table, encoding="utf-8")
    print(table, end="")
    return EXIT_OK


def cmd_generate(args: argparse.Namespace) -> int:
    vmap, agents = generate_forest_scenario(args.seed, args.agents, args.pillars, radius=args.radius)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_scenario(out / "map.json", out / "scenario.json", vmap, agents)
    print(json.dumps({"map": str(out / "map.json"), "scenario": str(out / "scenario.json")}))
    return EXIT_OK


COMMANDS = {"plan": cmd_plan, "verify": cmd_verify, "plot": cmd_plot, "bench": cmd_bench, "generate": cmd_generate}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ScenarioError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except PlanningError as exc:
        print(f"error: stage={exc.stage} reason={exc.reason}: {exc}", file=sys.stderr)
        return EXIT_UNSOLVED
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
