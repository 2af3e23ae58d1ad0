"""Acceptance criteria 1-9, one test each, each printing a single PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``.
"""

from __future__ import annotations

import math
import time

import numpy as np
import pytest
from helpers import brute_adjacency, brute_force_matches, line, scene, vehicle
from test_metrics import naive_samples, random_instance

from lanesim.bench import (BaselinePlanner, ReversePlanner, Setting, ZeroActionPlanner, directory_size,
                           export_suite, planner_input, RouteTracker, run_benchmark, run_scenario)
from lanesim.lanegraph import Route, nearest_lane, recover_adjacency, select_route
from lanesim.metrics import frechet_1d, geo_metrics, topo_metrics
from lanesim.raster import RasterConfig, rasterize, vectorize_scene
from lanesim.scene import AgentKind
from lanesim.sim import EgoAction, IdmParams, SimConfig, advance_longitudinal, idm_acceleration, init_simulation, step
from lanesim.worldgen import LAYOUTS, GenConfig, extrapolate_route, generate_scene, sample_traffic


@pytest.fixture
def report(capsys):
    def emit(n: int, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\nCRITERION {n}: {'PASS' if ok else 'FAIL'} | {detail}")
        assert ok, detail
    return emit


def fork_free(g) -> bool:
    return g.adjacency.sum(axis=1).max(initial=0) <= 1 and g.adjacency.sum(axis=0).max(initial=0) <= 1


def test_criterion_1_reconstruction_identity(report):
    t0 = time.perf_counter()
    scenes = [generate_scene(GenConfig(seed=s, layout=LAYOUTS[s % 4])) for s in range(100)]
    t1 = time.perf_counter()
    bad = 0
    for s in scenes:
        for m in (geo_metrics(s.graph, s.graph), topo_metrics(s.graph, s.graph)):
            bad += not (m.f1 == 1.0 and m.lateral == 0.0 and m.chamfer == 0.0)
    t2 = time.perf_counter()
    ok = bad == 0 and t2 - t0 < 10.0
    report(1, ok, f"{bad} non-identical of 200 metric triples; metrics {t2 - t1:.2f}s, total {t2 - t0:.2f}s (< 10s)")


def test_criterion_2_rsi_pathway(report):
    worst_f1, worst_lat, n = 1.0, 0.0, 0
    for s in range(100):
        sc = generate_scene(GenConfig(seed=s, layout=("straight", "curve")[s % 2]))
        assert fork_free(sc.graph)
        rsi = rasterize(sc, RasterConfig(fov=sc.fov))
        m = geo_metrics(vectorize_scene(rsi).graph, sc.graph)
        worst_f1, worst_lat, n = min(worst_f1, m.f1), max(worst_lat, m.lateral), n + 1
    gaps = []
    for s in range(20):
        sc = generate_scene(GenConfig(seed=s, layout=("intersection", "grid")[s % 2]))
        assert not fork_free(sc.graph)
        pred = vectorize_scene(rasterize(sc, RasterConfig(fov=sc.fov))).graph
        gaps.append(topo_metrics(pred, sc.graph).chamfer > geo_metrics(pred, sc.graph).chamfer)
    ok = worst_f1 >= 0.95 and worst_lat <= 0.25 and all(gaps)
    report(2, ok, f"fork-free n={n}: min GEO F1 {worst_f1:.4f} (>= 0.95), max lateral {worst_lat:.3f} m (<= 0.25); "
                  f"TOPO chamfer > GEO chamfer on {sum(gaps)}/{len(gaps)} fork scenes")


def test_criterion_3_adjacency_oracle(report):
    mismatched = 0
    for k in range(1000):
        sc = generate_scene(GenConfig(seed=k // 4, layout=LAYOUTS[k % 4], agent_density=0.0))
        mismatched += not np.array_equal(recover_adjacency(sc.lanes), sc.graph.adjacency)

    def pair(gap, angle_deg):
        th = math.radians(angle_deg)
        start = np.array([gap, 0.0])
        return np.array([line((-10, 0), (0, 0)), line(start, start + 10 * np.array([math.cos(th), math.sin(th)]))])

    cases = {(1.49, 0): True, (1.51, 0): False, (0.5, 59): True, (0.5, 61): False}
    boundary_ok = all(bool(recover_adjacency(pair(g, a))[0, 1]) == want and
                      bool(brute_adjacency(pair(g, a))[0, 1]) == want for (g, a), want in cases.items())
    report(3, mismatched == 0 and boundary_ok,
           f"{mismatched}/1000 scenes differ from generator successor lists; boundary cases "
           f"1.49/1.51 m and 59/61 deg {'correct' if boundary_ok else 'WRONG'}")


def test_criterion_4_metric_oracles(report):
    wrong = 0
    for seed in range(200):
        pred, gt = random_instance(seed)
        p, g = naive_samples(pred.lanes), naive_samples(gt.lanes)
        assert len(p) <= 50 and len(g) <= 50
        wrong += geo_metrics(pred, gt).f1 != pytest.approx(2 * brute_force_matches(p, g, 1.5) / (len(p) + len(g)),
                                                           abs=1e-12)
    a = np.array([-1.0] * 5 + [0.0] * 10 + [1.0] * 5)
    a = a / a.std(ddof=1)
    shifted = frechet_1d(a, a + 3.0)
    ok = wrong == 0 and abs(shifted - 9.0) <= 1e-9
    report(4, ok, f"F1 oracle mismatches {wrong}/200; frechet shift-3 = {shifted:.12f} (9.0 +- 1e-9)")


def test_criterion_5_idm_properties(report):
    p = IdmParams()
    free = abs(idm_acceleration(p.desired_speed, 0.0, math.inf, p))
    stand = abs(idm_acceleration(0.0, 0.0, p.min_gap, p))
    collisions, runs = 0, 0
    for factor in (1.0, 1.25, 1.5, 2.0, 3.0):
        for decel in np.linspace(0.5, p.max_decel, 5):
            for v0 in (2.0, 5.0, 8.0, 10.0, 12.0):
                gap = factor * (p.min_gap + v0 * p.headway)
                xl, vl, xf, vf = gap, v0, 0.0, v0
                for _ in range(600):
                    acc = idm_acceleration(vf, vl, xl - xf, p)
                    dl, vl = advance_longitudinal(vl, -decel, 0.1)
                    df, vf = advance_longitudinal(vf, acc, 0.1)
                    xl, xf = xl + dl, xf + df
                    if xl - xf <= 0.0:
                        collisions += 1
                        break
                runs += 1
    ok = free < 1e-9 and stand < 1e-9 and collisions == 0
    report(5, ok, f"|a| free road {free:.1e}, standstill {stand:.1e} (< 1e-9); {collisions} collisions in {runs} runs")


def test_criterion_6_simulation_contract(report):
    cfg = SimConfig(horizon=20.0)
    road = scene([line((-95, 0), (95, 0))], red=[line((40, 0), (50, 0))],
                 agents=[vehicle(70.0, 0.0, 0.0, 8.0)], fov=200.0)
    state = init_simulation(road, Route((0,), 95.0), cfg)
    red_at, frozen = {}, True
    pose0 = (state.agents[0].x, state.agents[0].y, state.agents[0].heading, state.agents[0].speed)
    for _ in range(200):
        red_at[round(state.clock, 6)] = state.light_is_red(0)
        step(state, EgoAction(), cfg)
        a = state.agents[0]
        frozen &= (a.x, a.y, a.heading, a.speed) == pose0
    flip = red_at[14.9] and not red_at[15.0]

    def traced(seed):
        sc = sample_traffic(generate_scene(GenConfig(seed=seed, layout="grid")).without_agents(), seed, "hard")
        start = nearest_lane(sc.graph, (0.0, 0.0), heading=0.0)
        trace, events, rep = run_scenario(sc, select_route(sc.graph, start, "hard"), BaselinePlanner(),
                                          SimConfig(horizon=10.0))
        return trace, events, rep

    same = traced(7) == traced(7)
    report(6, flip and frozen and same,
           f"red at 14.9 s {red_at[14.9]}, green at 15.0 s {not red_at[15.0]}; agent at 70 m bitwise frozen "
           f"{frozen}; identical seeds identical traces {same}")


def test_criterion_7_benchmark_adjudication(report):
    road = scene([line((-5, 0), (105, 0))], fov=240.0)
    route = Route((0,), 5.0, 105.0)
    cfg = SimConfig(horizon=30.0)
    zero = run_scenario(road, route, ZeroActionPlanner(), cfg)[2]
    back = run_scenario(road, route, ReversePlanner(7.0), cfg)[2]
    base = run_scenario(road, route, BaselinePlanner(), cfg)[2]
    zero_row = run_benchmark([Setting("lane_and_agent", 100.0)], "zero", range(5)).rows[0]
    settings = [Setting("lane_and_agent", 100.0, "easy", "easy"), Setting("lane_and_agent", 100.0, "hard", "easy"),
                Setting("lane_and_agent", 100.0, "easy", "hard")]
    easy, hard_routes, hard_traffic = run_benchmark(settings, "baseline", range(20)).rows
    ok = (zero.cause == "low_progress" and zero_row.pfr == 1.0 and zero_row.causes["low_progress"] == 5
          and back.cause == "wrong_direction" and not base.failed
          and hard_routes.pfr >= easy.pfr and hard_traffic.mean_agents > easy.mean_agents
          and easy.scenarios == hard_routes.scenarios == hard_traffic.scenarios == 20)
    report(7, ok, f"zero-action PFR {zero_row.pfr:.2f} ({zero.cause}); reverse 7 m -> {back.cause}; baseline empty "
                  f"straight failed={base.failed}; PFR hard routes {hard_routes.pfr:.2f} >= easy {easy.pfr:.2f}; "
                  f"agents hard traffic {hard_traffic.mean_agents:.2f} > easy {easy.mean_agents:.2f} (n=20)")


def test_criterion_8_long_routes(report):
    chain = extrapolate_route(GenConfig(seed=0, layout="grid"), 60, "easy", target_length=500.0)
    lanes = chain.route.lane_indices
    recovered = recover_adjacency(chain.graph.lanes)
    valid = all(recovered[a, b] for a, b in zip(lanes, lanes[1:])) and chain.status == "complete"
    world = sample_traffic(chain.world, 0, "hard", density=12.0)
    vehicles = [a for a in world.agents if a.kind is AgentKind.VEHICLE]
    others = [a for a in world.agents if a.kind is not AgentKind.VEHICLE]
    agents = (vehicles + others)[:150]
    world = world.__class__(world.graph, world.red_lights, world.green_lights, tuple(agents), (0.0, 0.0),
                            world.fov, world.city)
    cfg = SimConfig(horizon=150.0)
    planner = BaselinePlanner()
    tracker = RouteTracker(chain.route.polyline(world.graph))
    t0 = time.perf_counter()
    state = init_simulation(world, chain.route, cfg)
    route_s = 0.0
    for _ in range(cfg.n_steps):
        route_s = float(tracker.project([(state.ego.x, state.ego.y)], route_s)[0][0])
        step(state, planner(planner_input(state, tracker, route_s, cfg)), cfg)
    wall = time.perf_counter() - t0
    ok = valid and chain.route_length >= 500.0 and len(agents) == 150 and state.clock == pytest.approx(150.0) \
        and wall < 150.0
    report(8, ok, f"stitched route {chain.route_length:.1f} m (>= 500), adjacency-valid {valid}; "
                  f"150 s / {len(agents)} agents / {cfg.n_steps} steps in {wall:.1f} s wall (< 150)")


def test_criterion_9_suite_size(report, tmp_path):
    problems = export_suite(Setting("lane_and_agent", 100.0, "hard", "hard"), range(100), tmp_path)
    files = len(list(tmp_path.iterdir()))
    size = directory_size(tmp_path)
    ok = size < 50e6 and not problems and files == 200
    report(9, ok, f"100-scenario suite: {files} files, {size / 1e6:.2f} MB (< 50 MB), {len(problems)} failures")
