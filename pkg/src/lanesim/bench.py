"""Planner interface, a centerline pure-pursuit/IDM baseline, failure adjudication
and the planner-failure-rate benchmark harness."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from lanesim import geometry as geo
from lanesim.lanegraph import Route, count_turns, nearest_lane, select_route
from lanesim.scene import AgentBox, LaneGraph, SceneState, load_scene, save_scene
from lanesim.sim import (EGO_ID, EgoAction, EgoLimits, EgoState, IdmParams, LaneIndex, SimConfig,
                         contact_point, idm_acceleration, init_simulation, step)
from lanesim.worldgen import GenConfig, extrapolate_route, sample_traffic

log = logging.getLogger(__name__)

CAUSES = ("low_progress", "wrong_direction", "off_road", "at_fault_collision", "none")
MIN_PROGRESS = 0.2
MAX_WRONG_DIRECTION = 6.0
TASKS = ("lane2agent", "lane_and_agent")
SECONDS_PER_METER = 0.3  # 100 m -> 30 s, 500 m -> 150 s
TASK_LAYOUTS = {"lane2agent": ("grid",), "lane_and_agent": ("grid", "intersection", "curve", "straight")}


class RouteTracker:
    """Arc-length projection onto a route polyline, searched in a window around a hint."""

    def __init__(self, polyline: np.ndarray):
        self.line = np.asarray(polyline, dtype=float)
        self.cum = geo.arc_lengths(self.line)
        self.length = float(self.cum[-1])
        self.a, self.b = self.line[:-1], self.line[1:]
        d = self.b - self.a
        self.heading = np.arctan2(d[:, 1], d[:, 0])
        self.seg_len = np.linalg.norm(d, axis=1)

    def window(self, s_hint: float, back: float, ahead: float) -> np.ndarray:
        return np.flatnonzero((self.cum[1:] >= s_hint - back) & (self.cum[:-1] <= s_hint + ahead))

    def project(self, points, s_hint: float, back: float = 5.0, ahead: float = 25.0):
        """``(s, lateral, tangent_heading)`` arrays for each point, restricted to the window."""
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        segs = self.window(s_hint, back, ahead)
        if len(segs) == 0:
            segs = np.arange(len(self.a))
        dist, t = geo.point_segment_distance(pts, self.a[segs], self.b[segs])
        k = dist.argmin(axis=1)
        rows = np.arange(len(pts))
        seg = segs[k]
        s = self.cum[seg] + t[rows, k] * self.seg_len[seg]
        return s, dist[rows, k], self.heading[seg]

    def point_at(self, s: float) -> np.ndarray:
        return geo.interpolate(self.line, self.cum, min(max(s, 0.0), self.length))


# --- planners --------------------------------------------------------------


@dataclass(frozen=True)
class PlannerInput:
    ego: EgoState
    route: RouteTracker
    route_s: float
    agents: tuple[AgentBox, ...]  # active agents only
    red_lights: tuple[np.ndarray, ...]
    green_lights: tuple[np.ndarray, ...]
    graph: LaneGraph
    clock: float
    dt: float
    lane_width: float
    idm: IdmParams


class BaselinePlanner:
    """Pure-pursuit steering on the route centerline with IDM speed control.

    The IDM leader is the nearest agent on the route ahead or the start of a red
    light polyline on the route. The desired speed is capped by a lateral
    acceleration budget over the upcoming route curvature.
    """

    def __init__(self, min_lookahead: float = 5.0, lookahead_time: float = 1.0, lateral_accel: float = 2.0,
                 preview: float = 40.0, leader_range: float = 60.0):
        self.min_lookahead = min_lookahead
        self.lookahead_time = lookahead_time
        self.lateral_accel = lateral_accel
        self.preview = preview
        self.leader_range = leader_range
        self._curvature: tuple[int, np.ndarray] | None = None

    def _route_curvature(self, route: RouteTracker) -> np.ndarray:
        if self._curvature is None or self._curvature[0] != id(route):
            dh = np.abs(geo.wrap_angle(np.diff(route.heading)))
            ds = 0.5 * (route.seg_len[:-1] + route.seg_len[1:])
            kappa = np.concatenate([[0.0], dh / np.maximum(ds, 1e-6), [0.0]])
            self._curvature = (id(route), kappa)
        return self._curvature[1]

    def speed_limit(self, inp: PlannerInput) -> float:
        route, s = inp.route, inp.route_s
        kappa = self._route_curvature(route)
        ahead = np.flatnonzero((route.cum >= s - 1.0) & (route.cum <= s + self.preview))
        limit = inp.idm.desired_speed
        for k in ahead:
            if kappa[k] > 1e-6:
                v_turn = math.sqrt(self.lateral_accel / kappa[k])
                dist = max(route.cum[k] - s, 0.0)
                limit = min(limit, math.sqrt(v_turn ** 2 + 2.0 * inp.idm.comfort_decel * dist))
        return max(limit, 1.0)

    def leaders(self, inp: PlannerInput) -> list[tuple[float, float]]:
        ego, route, s = inp.ego, inp.route, inp.route_s
        half = ego.extent[0] / 2.0
        out = []
        if inp.agents:
            centers = np.array([a.center for a in inp.agents])
            s_a, lat, tangent = route.project(centers, s, back=half, ahead=self.leader_range)
            for a, sa, la, th in zip(inp.agents, s_a, lat, tangent):
                if sa <= s or la > inp.lane_width / 2.0 + a.extent[1] / 2.0:
                    continue
                gap = sa - s - half - a.extent[0] / 2.0
                out.append((gap, max((a.speed or 0.0) * math.cos(a.heading - th), 0.0)))
        if inp.red_lights:
            starts = np.array([pl[0] for pl in inp.red_lights])
            s_l, lat, tangent = route.project(starts, s, back=0.0, ahead=self.leader_range)
            for pl, sl, la, th in zip(inp.red_lights, s_l, lat, tangent):
                aligned = abs(geo.wrap_angle(geo.start_heading(pl) - th)) < math.radians(60.0)
                gap = sl - s - half
                if la <= 1.0 and aligned and gap > -0.5:
                    out.append((max(gap, 1e-3), 0.0))
        return out

    def __call__(self, inp: PlannerInput) -> EgoAction:
        ego = inp.ego
        v = ego.speed
        lookahead = max(self.min_lookahead, self.lookahead_time * abs(v))
        exhausted = inp.route_s + lookahead > inp.route.length
        target = inp.route.point_at(inp.route_s + lookahead)
        dx, dy = target[0] - ego.x, target[1] - ego.y
        c, s_ = math.cos(ego.heading), math.sin(ego.heading)
        lx, ly = c * dx + s_ * dy, -s_ * dx + c * dy
        d2 = lx * lx + ly * ly
        kappa = 2.0 * ly / d2 if d2 > 1e-6 else 0.0
        if exhausted:
            return EgoAction(-min(inp.idm.max_decel, max(v, 0.0) / inp.dt), kappa)
        params = replace(inp.idm, desired_speed=self.speed_limit(inp))
        acc = idm_acceleration(v, 0.0, math.inf, params)
        for gap, v_lead in self.leaders(inp):
            acc = min(acc, idm_acceleration(v, v_lead, gap, params))
        if v <= 0.0 and acc < 0.0:
            acc = 0.0  # hold at standstill instead of reversing
        return EgoAction(acc, kappa)


class ZeroActionPlanner:
    """Commands zero acceleration and zero curvature forever."""

    def __call__(self, inp: PlannerInput) -> EgoAction:
        return EgoAction(0.0, 0.0)


class ReversePlanner:
    """Backs up along the current heading for ``distance`` meters, then stops."""

    def __init__(self, distance: float = 7.0, speed: float = 2.0):
        self.distance = distance
        self.speed = speed
        self._origin = None

    def __call__(self, inp: PlannerInput) -> EgoAction:
        ego = inp.ego
        if self._origin is None:
            self._origin = (ego.x, ego.y)
        moved = math.hypot(ego.x - self._origin[0], ego.y - self._origin[1])
        target = -self.speed if moved < self.distance else 0.0
        return EgoAction((target - ego.speed) / 1.0, 0.0)


PLANNERS: dict[str, Callable[[], Callable[[PlannerInput], EgoAction]]] = {
    "baseline": BaselinePlanner,
    "zero": ZeroActionPlanner,
    "reverse": ReversePlanner,
}


def planner_input(state, tracker: RouteTracker, route_s: float, cfg: SimConfig) -> PlannerInput:
    scene = state.scene
    agents = tuple(AgentBox((a.x, a.y), a.heading, a.extent, a.kind,
                            None if a.kind.value == "static" else a.speed)
                   for a in state.agents if a.active)
    red = tuple(state.lights[i].points for i in range(len(state.lights)) if state.light_is_red(i))
    green = tuple(state.lights[i].points for i in range(len(state.lights)) if not state.light_is_red(i))
    ego = replace(state.ego)
    return PlannerInput(ego, tracker, route_s, agents, red, green, scene.graph, state.clock, cfg.dt,
                        cfg.lane_width, cfg.idm)


# --- adjudication ----------------------------------------------------------


@dataclass(frozen=True)
class FailureReport:
    failed: bool
    cause: str
    progress: float
    wrong_direction: float
    turns: int
    agents: int
    t_end: float = 0.0
    route_length: float = 0.0

    def __post_init__(self):
        if self.cause not in CAUSES:
            raise ValueError(f"unknown cause {self.cause!r}")
        if self.failed != (self.cause != "none"):
            raise ValueError("failed must be true iff a cause is recorded")


class Adjudicator:
    """Incremental failure bookkeeping over simulation frames.

    Progress is the running maximum of the ego's windowed projection onto the route;
    wrong-direction distance accumulates motion against the local route tangent.
    The first failure ends adjudication; low progress is judged at the end.
    """

    def __init__(self, scene: SceneState, route: Route, cfg: SimConfig = SimConfig()):
        self.cfg = cfg
        self.tracker = RouteTracker(route.polyline(scene.graph))
        self.lanes = LaneIndex(scene.graph)
        self.extents = [tuple(a.extent) for a in scene.agents]
        self.turns = count_turns(route, scene.graph) if route.lane_indices else 0
        self.n_agents = len(scene.agents)
        self.progress_s = 0.0
        self.s_hint = 0.0
        self.wrong = 0.0
        self.prev = None
        self.contacts: set = set()
        self.cause = "none"
        self.t = 0.0
        self.done = False

    @property
    def completed(self) -> bool:
        return self.progress_s >= self.tracker.length - 1e-6

    def update(self, t: float, ego: tuple, agents: Iterable[tuple]) -> None:
        """Consume one frame: ``ego = (x, y, heading, speed)``, agents ``(id, x, y, heading)``."""
        if self.done:
            return
        self.t = t
        x, y, heading, speed = ego
        s, lateral, tangent = self.tracker.project([(x, y)], self.s_hint)
        s, lateral, tangent = float(s[0]), float(lateral[0]), float(tangent[0])
        self.s_hint = s
        self.progress_s = max(self.progress_s, min(s, self.tracker.length))
        if self.prev is not None:
            along = (x - self.prev[0]) * math.cos(tangent) + (y - self.prev[1]) * math.sin(tangent)
            if along < 0.0:
                self.wrong += -along
        self.prev = (x, y)
        causes = set()
        ego_box = geo.box_corners((x, y), heading, *EgoState().extent)
        touching = set()
        reach = 0.5 * math.hypot(*EgoState().extent)
        for ident, ax, ay, ah in agents:
            ext = self.extents[ident]
            if math.hypot(ax - x, ay - y) > reach + 0.5 * math.hypot(*ext):
                continue
            box = geo.box_corners((ax, ay), ah, *ext)
            if not geo.boxes_overlap(ego_box, box):
                continue
            touching.add(ident)
            if ident in self.contacts:
                continue
            p = contact_point(ego_box, box)
            front = (p[0] - x) * math.cos(heading) + (p[1] - y) * math.sin(heading) > 0.0
            off_route = lateral > self.cfg.lane_width / 2.0
            if (speed > 0.1 and front) or off_route:
                causes.add("at_fault_collision")
        self.contacts = touching
        if self.lanes.distance((x, y)) > self.cfg.lane_width / 2.0 + 0.5:
            causes.add("off_road")
        if self.wrong > MAX_WRONG_DIRECTION:
            causes.add("wrong_direction")
        for cause in ("at_fault_collision", "off_road", "wrong_direction"):
            if cause in causes:
                self.cause, self.done = cause, True
                return
        if self.completed:
            self.done = True

    def progress(self) -> float:
        if self.tracker.length <= 0:
            return 1.0
        return min(max(self.progress_s / self.tracker.length, 0.0), 1.0)

    def finish(self) -> FailureReport:
        cause = self.cause
        if cause == "none" and self.progress() < MIN_PROGRESS:
            cause = "low_progress"
        return FailureReport(cause != "none", cause, self.progress(), float(self.wrong), self.turns, self.n_agents,
                             self.t, self.tracker.length)


def _frames(trace: Sequence[tuple]):
    frame_t, ego, agents = None, None, []
    for t, ident, _kind, x, y, h, v, _active in trace:
        if frame_t is not None and t != frame_t:
            yield frame_t, ego, agents
            ego, agents = None, []
        frame_t = t
        if ident == EGO_ID:
            ego = (x, y, h, v)
        else:
            agents.append((int(ident), x, y, h))
    if frame_t is not None:
        yield frame_t, ego, agents


def adjudicate(trace: Sequence[tuple], scene: SceneState, route: Route, cfg: SimConfig = SimConfig()) -> FailureReport:
    """Failure report of a recorded trace (pure function of trace, scene and route)."""
    adj = Adjudicator(scene, route, cfg)
    for t, ego, agents in _frames(trace):
        adj.update(t, ego, agents)
    return adj.finish()


def run_scenario(scene: SceneState, route: Route, planner, cfg: SimConfig = SimConfig(),
                 planner_route: Route | None = None):
    """Simulate until the horizon, the route end or the first failure.

    ``planner_route`` (default ``route``) is what the planner tracks; it may extend
    past the adjudicated route so that the planner does not brake for its end.
    Returns ``(trace, events, report)``.
    """
    state = init_simulation(scene, route, cfg)
    adj = Adjudicator(scene, route, cfg)
    tracker = RouteTracker((planner_route or route).polyline(scene.graph))
    route_s = 0.0

    def feed():
        n = len(state.agents) + 1
        frame = state.trace[-n:]
        _, _, _, x, y, h, v, _ = frame[0]
        adj.update(frame[0][0], (x, y, h, v), [(r[1], r[3], r[4], r[5]) for r in frame[1:]])

    feed()
    for _ in range(cfg.n_steps):
        if adj.done:
            break
        s, _, _ = tracker.project([(state.ego.x, state.ego.y)], route_s)
        route_s = float(s[0])
        step(state, planner(planner_input(state, tracker, route_s, cfg)), cfg)
        feed()
    return state.trace, state.events, adj.finish()


# --- scenario construction -------------------------------------------------


@dataclass(frozen=True)
class Setting:
    task: str = "lane_and_agent"
    length: float = 100.0
    routes: str = "easy"
    traffic: str = "easy"

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")
        for name in ("routes", "traffic"):
            if getattr(self, name) not in ("easy", "hard"):
                raise ValueError(f"{name} difficulty must be 'easy' or 'hard'")
        if not self.length > 0:
            raise ValueError("route length must be positive")

    @property
    def horizon(self) -> float:
        return SECONDS_PER_METER * self.length


@dataclass
class Scenario:
    setting: Setting
    seed: int
    scene: SceneState
    route: Route  # adjudicated, trimmed to the setting's length
    planner_route: Route  # full lanes, for tracking past the end


def trim_route(route: Route, graph: LaneGraph, length: float) -> Route:
    """Cut a route so that it spans exactly ``length`` meters from its entry offset."""
    remaining = length + route.entry_offset
    for n, i in enumerate(route.lane_indices):
        lane_len = float(graph.lengths[i])
        if remaining <= lane_len or n == len(route.lane_indices) - 1:
            return Route(route.lane_indices[:n + 1], route.entry_offset, min(remaining, lane_len))
        remaining -= lane_len
    return route


def build_scenario(setting: Setting, seed: int, scene_files: Sequence[str | Path] | None = None,
                   density: float = 4.0) -> Scenario:
    """Map plus route plus traffic for one (setting, seed); raises ``RuntimeError`` when infeasible."""
    if scene_files:
        path = scene_files[seed % len(scene_files)]
        base = load_scene(Path(path).read_bytes()).without_agents()
        start = nearest_lane(base.graph, (0.0, 0.0), heading=0.0)
        _, entry, _ = geo.project_to_polyline((0.0, 0.0), base.graph.lanes[start])
        full = replace(select_route(base.graph, start, setting.routes), entry_offset=entry)
    else:
        layouts = TASK_LAYOUTS[setting.task]
        cfg = GenConfig(seed=seed, layout=layouts[seed % len(layouts)], agent_density=0.0)
        tiles = int(math.ceil(setting.length / 16.0)) + 8
        chain = extrapolate_route(cfg, tiles, setting.routes, target_length=setting.length + 25.0,
                                  with_agents=False)
        base = chain.world
        full = chain.route
    if not full.lane_indices or full.length(base.graph) < setting.length:
        raise RuntimeError(f"no {setting.length:g} m route for seed {seed}")
    base = replace(base, agents=(), ego_velocity=(0.0, 0.0))
    scene = sample_traffic(base, seed, setting.traffic, density=density)
    return Scenario(setting, seed, scene, trim_route(full, base.graph, setting.length), full)


# --- benchmark -------------------------------------------------------------


@dataclass
class ScenarioResult:
    setting: Setting
    seed: int
    report: FailureReport | None
    error: str | None = None


@dataclass
class BenchmarkRow:
    task: str
    length: float
    routes: str
    traffic: str
    scenarios: int
    construction_failures: int
    mean_turns: float
    mean_agents: float
    pfr: float
    causes: dict = field(default_factory=dict)


@dataclass
class BenchmarkTable:
    rows: list[BenchmarkRow]

    COLUMNS = ("task", "length", "routes", "traffic", "scenarios", "construction_failures", "mean_turns",
               "mean_agents", "pfr", "low_progress", "wrong_direction", "off_road", "at_fault_collision")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for r in self.rows:
                w.writerow([r.task, f"{r.length:g}", r.routes, r.traffic, r.scenarios, r.construction_failures,
                            f"{r.mean_turns:.4f}", f"{r.mean_agents:.4f}", f"{r.pfr:.4f}",
                            *(r.causes.get(c, 0) for c in CAUSES[:-1])])


def run_one(setting: Setting, seed: int, planner: str = "baseline", scene_files=None) -> ScenarioResult:
    try:
        sc = build_scenario(setting, seed, scene_files)
    except (RuntimeError, LookupError, ValueError) as exc:
        log.warning("scenario %s seed %d not constructed: %s", setting, seed, exc)
        return ScenarioResult(setting, seed, None, str(exc))
    cfg = SimConfig(horizon=setting.horizon)
    _, _, report = run_scenario(sc.scene, sc.route, PLANNERS[planner](), cfg, sc.planner_route)
    return ScenarioResult(setting, seed, report)


def _run_job(args):
    return run_one(*args)


def aggregate(setting: Setting, results: Sequence[ScenarioResult]) -> BenchmarkRow:
    done = [r.report for r in results if r.report is not None]
    causes = {c: sum(1 for rep in done if rep.cause == c) for c in CAUSES[:-1]}
    n = len(done)
    return BenchmarkRow(setting.task, setting.length, setting.routes, setting.traffic, n,
                        len(results) - n,
                        float(np.mean([r.turns for r in done])) if n else math.nan,
                        float(np.mean([r.agents for r in done])) if n else math.nan,
                        float(np.mean([r.failed for r in done])) if n else math.nan, causes)


def run_benchmark(settings: Sequence[Setting], planner: str = "baseline", seeds: Iterable[int] = range(100),
                  workers: int = 1, scene_files=None) -> BenchmarkTable:
    """Run every (setting, seed) scenario and reduce per setting in (setting, seed) order."""
    if not settings:
        raise ValueError("benchmark suite is empty")
    if planner not in PLANNERS:
        raise ValueError(f"unknown planner {planner!r}; choose from {sorted(PLANNERS)}")
    seeds = list(seeds)
    jobs = [(s, seed, planner, scene_files) for s in settings for seed in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_job, jobs))
    else:
        results = [_run_job(j) for j in jobs]
    by_setting = {s: [] for s in settings}
    for res in sorted(results, key=lambda r: (settings.index(r.setting), r.seed)):
        by_setting[res.setting].append(res)
    return BenchmarkTable([aggregate(s, by_setting[s]) for s in settings])


def export_suite(setting: Setting, seeds: Iterable[int], out_dir, scene_files=None) -> list[str]:
    """Write scene files plus a route manifest per scenario; returns failed seeds' messages."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    problems = []
    for seed in seeds:
        try:
            sc = build_scenario(setting, seed, scene_files)
        except (RuntimeError, LookupError, ValueError) as exc:
            problems.append(f"seed {seed}: {exc}")
            continue
        stem = f"{setting.task}_{setting.length:g}_{setting.routes}_{setting.traffic}_{seed:04d}"
        (out / f"{stem}.scene.json").write_bytes(save_scene(sc.scene))
        manifest = {"setting": asdict(setting), "seed": seed,
                    "route": {"lanes": list(sc.route.lane_indices), "entry_offset": sc.route.entry_offset,
                              "exit_offset": sc.route.exit_offset},
                    "planner_route": {"lanes": list(sc.planner_route.lane_indices)}}
        (out / f"{stem}.manifest.json").write_text(json.dumps(manifest, sort_keys=True))
    return problems


def directory_size(path) -> int:
    return sum(os.path.getsize(os.path.join(root, f)) for root, _, files in os.walk(path) for f in files)


__all__ = ["Adjudicator", "BaselinePlanner", "BenchmarkRow", "BenchmarkTable", "CAUSES", "EgoLimits",
           "FailureReport", "PLANNERS", "PlannerInput", "ReversePlanner", "RouteTracker", "Scenario", "Setting",
           "ZeroActionPlanner", "adjudicate", "aggregate", "build_scenario", "export_suite", "planner_input",
           "run_benchmark", "run_one", "run_scenario", "trim_route"]
