"""Command line entry point: ``lanesim <subcommand> ...``.

Exit codes: 0 success, 1 input error, 2 internal invariant violation.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from lanesim import metrics
from lanesim.bench import TASKS, BaselinePlanner, Setting, directory_size, export_suite, run_benchmark, run_scenario
from lanesim.lanegraph import (FEATURE_NAMES, count_turns, enumerate_routes, nearest_lane, select_route,
                               urban_features)
from lanesim.raster import RasterConfig, rasterize, rsi_from_bytes, rsi_to_bytes, rsi_to_svg, vectorize_scene
from lanesim.scene import SceneError, SceneState, load_scene, save_scene, validate_scene
from lanesim.sim import SimConfig, write_events, write_trace
from lanesim.worldgen import LAYOUTS, GenConfig, extrapolate_route, generate_scene

log = logging.getLogger("lanesim")


class InputError(Exception):
    """Bad user input: missing files, malformed scenes, inconsistent options."""


class InvariantError(Exception):
    """An internal consistency check failed."""


def _read_scene(path) -> SceneState:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"scene file not found: {p}")
    try:
        return load_scene(p.read_bytes())
    except SceneError as exc:
        raise InputError(f"{p}: {exc}") from exc


def _scene_files(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise InputError(f"not a directory: {d}")
    files = sorted(d.glob("*.json"))
    files = [f for f in files if not f.name.endswith(".manifest.json") and f.name != "manifest.json"]
    if not files:
        raise InputError(f"no scene files in {d}")
    return files


def cmd_rasterize(args) -> int:
    scene = _read_scene(args.scene)
    rsi = rasterize(scene, RasterConfig(width=args.width, height=args.width, fov=scene.fov))
    Path(args.out).write_bytes(rsi_to_bytes(rsi))
    if args.png:
        Path(args.png).write_text(rsi_to_svg(rsi))
    return 0


def cmd_vectorize(args) -> int:
    p = Path(args.rsi)
    if not p.is_file():
        raise InputError(f"raster file not found: {p}")
    try:
        rsi = rsi_from_bytes(p.read_bytes())
    except ValueError as exc:
        raise InputError(f"{p}: {exc}") from exc
    scene = vectorize_scene(rsi, args.prune)
    Path(args.out).write_bytes(save_scene(scene))
    return 0


def cmd_eval_recon(args) -> int:
    gt_files = _scene_files(args.gt)
    pred_dir = Path(args.pred)
    rows = []
    for gt_path in gt_files:
        pred_path = pred_dir / gt_path.name
        if not pred_path.is_file():
            raise InputError(f"missing prediction for {gt_path.name} in {pred_dir}")
        gt, pred = _read_scene(gt_path), _read_scene(pred_path)
        rows.append(metrics.reconstruction_row(gt_path.name, pred.graph, gt.graph))
    metrics.write_recon_report(args.out, rows)
    agg = metrics.aggregate_rows(rows)
    print(" ".join(f"{k}={v:.4f}" for k, v in agg.items() if k != "scene_id"))
    return 0


def cmd_eval_gen(args) -> int:
    scenes = [_read_scene(p) for p in _scene_files(args.scenes)]
    ref = [_read_scene(p) for p in _scene_files(args.ref)]
    if len(scenes) < 2 or len(ref) < 2:
        raise InputError("need at least two scenes on each side")
    mean, std, flagged = metrics.route_length_stats(scenes)
    ref_mean, ref_std, _ = metrics.route_length_stats(ref)
    scores = metrics.FeatureFrechet().fit(ref).score_samples(scenes)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        w.writerow(["route_length_mean", f"{mean:.6f}"])
        w.writerow(["route_length_std", f"{std:.6f}"])
        w.writerow(["route_length_ref_mean", f"{ref_mean:.6f}"])
        w.writerow(["route_length_ref_std", f"{ref_std:.6f}"])
        w.writerow(["empty_scenes", flagged])
        for name in FEATURE_NAMES:
            w.writerow([f"frechet_{name}", repr(scores[name])])
    # display scaling only; the CSV keeps raw values
    print(f"route_length {mean:.2f} +- {std:.2f} (ref {ref_mean:.2f} +- {ref_std:.2f})")
    print(" ".join(f"{name}={scores[name]:.3e}" for name in FEATURE_NAMES))
    return 0


def cmd_features(args) -> int:
    files = _scene_files(args.scenes)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scene_id", *FEATURE_NAMES, "lanes", "routes", "longest_route", "max_turns"])
        for p in files:
            graph = _read_scene(p).graph
            f = urban_features(graph)
            routes = enumerate_routes(graph, nearest_lane(graph)) if len(graph) else []
            longest = max((r.length(graph) for r in routes), default=0.0)
            turns = max((count_turns(r, graph) for r in routes), default=0)
            w.writerow([p.name, f"{f.connectivity:.6f}", f.density, f.reach, f"{f.convenience:.6f}",
                        len(graph), len(routes), f"{longest:.3f}", turns])
    return 0


def cmd_gen(args) -> int:
    cfg = GenConfig(seed=args.seed, layout=args.layout, agent_density=args.density,
                    lane_count=(args.min_lanes, args.max_lanes))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.tiles <= 1:
        scene = generate_scene(cfg)
        validate_scene(scene)
        (out / "tile_000.scene.json").write_bytes(save_scene(scene))
        return 0
    chain = extrapolate_route(cfg, args.tiles, args.difficulty)
    for k, (_, scene) in enumerate(chain.tiles):
        try:
            validate_scene(scene)
        except SceneError as exc:
            raise InvariantError(f"tile {k}: {exc}") from exc
        (out / f"tile_{k:03d}.scene.json").write_bytes(save_scene(scene))
    manifest = {
        "seed": args.seed, "layout": args.layout, "difficulty": args.difficulty, "status": chain.status,
        "poses": [[p.x, p.y, p.heading] for p, _ in chain.tiles],
        "route_lanes": list(chain.route.lane_indices), "route_length": chain.route_length,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    if chain.route.lane_indices:
        line = chain.route.polyline(chain.graph)
        np.savetxt(out / "route.csv", line, delimiter=",", header="x,y", comments="", fmt="%.6f")
    if chain.status != "complete":
        log.warning("chain truncated after %d tiles", len(chain.tiles))
    return 0


def cmd_simulate(args) -> int:
    scene = _read_scene(args.scene)
    if len(scene.graph) == 0:
        raise InputError("scene has no lanes to route on")
    start = nearest_lane(scene.graph, (0.0, 0.0), heading=0.0)
    route = select_route(scene.graph, start, args.route)
    cfg = SimConfig(horizon=args.horizon)
    trace, events, report = run_scenario(scene, route, BaselinePlanner(), cfg)
    write_trace(args.trace, trace)
    write_events(args.events or str(args.trace) + ".events.jsonl", events)
    print(json.dumps(asdict(report), sort_keys=True))
    return 0


def cmd_benchmark(args) -> int:
    setting = Setting(args.task, float(args.length), args.routes, args.traffic)
    seeds = range(args.seed, args.seed + args.n)
    scenes = _scene_files(args.scenes) if args.scenes else None
    table = run_benchmark([setting], args.planner, seeds, workers=args.workers, scene_files=scenes)
    table.write_csv(args.out)
    for row in table.rows:
        if not 0.0 <= row.pfr <= 1.0 and row.scenarios:
            raise InvariantError(f"PFR out of range: {row.pfr}")
        print(f"{row.task} {row.length:g}m routes={row.routes} traffic={row.traffic} n={row.scenarios} "
              f"failed_construction={row.construction_failures} turns={row.mean_turns:.2f} "
              f"agents={row.mean_agents:.2f} pfr={row.pfr:.3f}")
    if args.export:
        problems = export_suite(setting, seeds, args.export, scenes)
        for p in problems:
            log.warning("export: %s", p)
        print(f"suite size: {directory_size(args.export) / 1e6:.2f} MB")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lanesim", description=__doc__.splitlines()[0])
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("rasterize", help="scene file -> 12-channel raster")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--png", help="optional SVG preview path")
    p.add_argument("--width", type=int, default=256)
    p.set_defaults(func=cmd_rasterize)

    p = sub.add_parser("vectorize", help="raster -> scene file via skeletonization")
    p.add_argument("--rsi", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--prune", type=float, default=3.0)
    p.set_defaults(func=cmd_vectorize)

    p = sub.add_parser("eval-recon", help="GEO/TOPO reconstruction table")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval_recon)

    p = sub.add_parser("eval-gen", help="route length and feature Frechet distances")
    p.add_argument("--scenes", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval_gen)

    p = sub.add_parser("features", help="urban-planning features per scene file")
    p.add_argument("--scenes", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("gen", help="procedural scene or extrapolated tile chain")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--layout", choices=LAYOUTS, default="intersection")
    p.add_argument("--tiles", type=int, default=1)
    p.add_argument("--difficulty", choices=("easy", "hard"), default="easy")
    p.add_argument("--density", type=float, default=4.0)
    p.add_argument("--min-lanes", type=int, default=1)
    p.add_argument("--max-lanes", type=int, default=2)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("simulate", help="closed-loop run of the baseline planner")
    p.add_argument("--scene", required=True)
    p.add_argument("--route", choices=("easy", "hard"), default="easy")
    p.add_argument("--horizon", type=float, default=30.0)
    p.add_argument("--trace", required=True)
    p.add_argument("--events")
    p.add_argument("--seed", type=int, default=0, help="unused; the simulation is deterministic")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("benchmark", help="planner failure rate for one setting")
    p.add_argument("--task", choices=TASKS, default="lane_and_agent")
    p.add_argument("--length", type=float, choices=(100.0, 500.0), default=100.0)
    p.add_argument("--routes", choices=("easy", "hard"), default="easy")
    p.add_argument("--traffic", choices=("easy", "hard"), default="easy")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--seed", type=int, default=0, help="first scenario seed")
    p.add_argument("--planner", choices=("baseline", "zero", "reverse"), default="baseline")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--scenes", help="directory of map scene files (lane2agent)")
    p.add_argument("--export", help="also write scene files and manifests to this directory")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_benchmark)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InvariantError as exc:
        print(f"internal invariant violated: {exc}", file=sys.stderr)
        return 2
    except (InputError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except AssertionError as exc:
        print(f"internal invariant violated: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
