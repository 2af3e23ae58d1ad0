"""Closed-loop traffic simulation on a lane graph.

Vehicles follow lane centerlines with the Intelligent Driver Model, pedestrians
walk at constant velocity, traffic lights toggle periodically, and agents farther
than the simulation radius from the ego are frozen. The ego is a kinematic
unicycle driven by an external action each step.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from lanesim import geometry as geo
from lanesim.lanegraph import Route
from lanesim.scene import EGO_EXTENT, AgentKind, LaneGraph, SceneState

log = logging.getLogger(__name__)

PROJECTION_DISTANCE = 5.0
PROJECTION_ANGLE_DEG = 60.0
HEADING_WEIGHT = 2.0  # meters per radian in the lane projection cost
TRACE_COLUMNS = ("t", "entity_id", "kind", "x", "y", "heading", "speed", "active")
EGO_ID = "ego"


@dataclass(frozen=True)
class IdmParams:
    desired_speed: float = 12.0
    max_accel: float = 1.5
    comfort_decel: float = 2.0
    min_gap: float = 2.0
    headway: float = 1.5
    exponent: float = 4.0
    max_decel: float = 4.0

    def __post_init__(self):
        for name in ("desired_speed", "max_accel", "comfort_decel", "min_gap", "headway", "exponent", "max_decel"):
            if not getattr(self, name) > 0:
                raise ValueError(f"IdmParams.{name} must be positive")


@dataclass(frozen=True)
class EgoLimits:
    max_accel: float = 3.0
    max_decel: float = 8.0
    max_curvature: float = 0.3
    max_curvature_rate: float = 1.0  # 1/m per second
    max_speed: float = 20.0
    min_speed: float = -5.0


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.1
    horizon: float = 30.0
    radius: float = 64.0
    light_period: float = 15.0
    idm: IdmParams = IdmParams()
    lane_width: float = 3.7
    ego: EgoLimits = EgoLimits()
    leader_lookahead: float = 80.0

    def __post_init__(self):
        for name in ("dt", "radius", "light_period", "lane_width", "horizon"):
            if not getattr(self, name) > 0:
                raise ValueError(f"SimConfig.{name} must be positive")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))


@dataclass(frozen=True)
class EgoAction:
    acceleration: float = 0.0
    curvature: float = 0.0


class Event(NamedTuple):
    event: str
    t: float
    payload: dict


def idm_acceleration(v: float, v_lead: float, gap: float, p: IdmParams = IdmParams()) -> float:
    """IDM acceleration, clamped to ``[-max_decel, max_accel]``.

    ``gap`` is bumper to bumper; ``math.inf`` means no leader. The dynamic part of
    the desired gap is floored at zero so a faster leader never induces braking.
    """
    if gap <= 0.0:
        return -p.max_decel
    v = max(v, 0.0)
    acc = 1.0 - (v / p.desired_speed) ** p.exponent
    if math.isfinite(gap):
        s_star = p.min_gap + max(0.0, v * p.headway + v * (v - v_lead) / (2.0 * math.sqrt(p.max_accel * p.comfort_decel)))
        acc -= (s_star / gap) ** 2
    return min(max(p.max_accel * acc, -p.max_decel), p.max_accel)


def advance_longitudinal(v: float, acc: float, dt: float) -> tuple[float, float]:
    """Distance travelled and final speed over ``dt``; speed never drops below zero."""
    v_new = v + acc * dt
    if v_new >= 0.0:
        return v * dt + 0.5 * acc * dt * dt, v_new
    return (v * v / (-2.0 * acc) if acc < 0 else 0.0), 0.0


class LaneIndex:
    """Precomputed lane geometry for fast projection and interpolation."""

    def __init__(self, graph: LaneGraph):
        self.graph = graph
        self.lanes = graph.lanes
        n = len(graph)
        self.cum = [geo.arc_lengths(pl) for pl in self.lanes]
        self.lengths = np.array([c[-1] for c in self.cum]) if n else np.zeros(0)
        self.next_lane = [min(graph.successors(i)) if graph.successors(i) else None for i in range(n)]
        if n:
            self.seg_a = self.lanes[:, :-1].reshape(-1, 2)
            self.seg_b = self.lanes[:, 1:].reshape(-1, 2)
            d = self.seg_b - self.seg_a
            self.seg_heading = np.arctan2(d[:, 1], d[:, 0])
            self.seg_len = np.linalg.norm(d, axis=1)
            self.seg_s0 = np.concatenate([c[:-1] for c in self.cum])
        self.segs_per_lane = self.lanes.shape[1] - 1 if n else 0

    def __len__(self):
        return len(self.lengths)

    def project(self, points):
        """Per point and lane: lateral distance, arc position and heading at the foot point.

        Returns arrays of shape ``(len(points), n_lanes)``.
        """
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        dist, t = geo.point_segment_distance(pts, self.seg_a, self.seg_b)
        m, n, k = len(pts), len(self), self.segs_per_lane
        dist = dist.reshape(m, n, k)
        best = dist.argmin(axis=2)
        rows = np.arange(m)[:, None]
        cols = np.arange(n)[None, :]
        seg = cols * k + best
        lateral = dist[rows, cols, best]
        s = self.seg_s0[seg] + t.reshape(m, n * k)[rows, seg] * self.seg_len[seg]
        return lateral, s, self.seg_heading[seg]

    def pose_at(self, lane: int, s: float) -> tuple[float, float, float]:
        pl, cum = self.lanes[lane], self.cum[lane]
        k = min(max(int(np.searchsorted(cum, s, side="right")) - 1, 0), len(pl) - 2)
        seg = cum[k + 1] - cum[k]
        u = (s - cum[k]) / seg if seg > 0 else 0.0
        a, b = pl[k], pl[k + 1]
        return a[0] + u * (b[0] - a[0]), a[1] + u * (b[1] - a[1]), math.atan2(b[1] - a[1], b[0] - a[0])

    def distance(self, point) -> float:
        if len(self) == 0:
            return math.inf
        dist, _ = geo.point_segment_distance(np.asarray(point, dtype=float)[None], self.seg_a, self.seg_b)
        return float(dist.min())


def project_to_lane(box, graph: LaneGraph | LaneIndex) -> tuple[int, float]:
    """Bind a box to the lane minimising lateral distance + 2 m/rad x heading difference.

    Only lanes within 5 m and 60 degrees qualify; raises ``LookupError`` otherwise.
    """
    index = graph if isinstance(graph, LaneIndex) else LaneIndex(graph)
    if len(index) == 0:
        raise LookupError("graph has no lanes")
    lateral, s, heading = index.project([box.center])
    dh = np.abs(geo.wrap_angle(heading[0] - box.heading))
    ok = (lateral[0] <= PROJECTION_DISTANCE) & (dh <= math.radians(PROJECTION_ANGLE_DEG))
    if not ok.any():
        raise LookupError("no lane within 5 m and 60 degrees")
    cost = np.where(ok, lateral[0] + HEADING_WEIGHT * dh, np.inf)
    lane = int(np.argmin(cost))
    return lane, float(s[0, lane])


@dataclass
class EgoState:
    x: float = 0.0
    y: float = 0.0
    heading: float = 0.0
    speed: float = 0.0
    curvature: float = 0.0
    extent: tuple[float, float] = EGO_EXTENT

    def corners(self) -> np.ndarray:
        return geo.box_corners((self.x, self.y), self.heading, *self.extent)


@dataclass
class AgentState:
    id: int
    kind: AgentKind
    extent: tuple[float, float]
    x: float
    y: float
    heading: float
    speed: float
    lane: int | None = None
    s: float = 0.0
    active: bool = False
    passive: bool = False  # never moves (static objects, unprojectable vehicles)
    offmap: bool = False  # ran past a lane without successors; keeps going straight

    def corners(self) -> np.ndarray:
        return geo.box_corners((self.x, self.y), self.heading, *self.extent)


@dataclass
class LightState:
    points: np.ndarray
    initially_red: bool
    lane: int | None = None
    stop_s: float = 0.0


@dataclass
class SimState:
    scene: SceneState
    route: Route
    index: LaneIndex
    ego: EgoState
    agents: list[AgentState]
    lights: list[LightState]
    dt: float
    light_period: float
    step_count: int = 0
    events: list[Event] = field(default_factory=list)
    trace: list[tuple] = field(default_factory=list)
    contacts: set = field(default_factory=set)
    off_road: bool = False

    @property
    def clock(self) -> float:
        return self.step_count * self.dt

    def light_is_red(self, i: int) -> bool:
        flips = int(math.floor(self.clock / self.light_period + 1e-9))
        return self.lights[i].initially_red != (flips % 2 == 1)

    def red_stop_points(self) -> list[tuple[int, float]]:
        return [(lt.lane, lt.stop_s) for i, lt in enumerate(self.lights) if lt.lane is not None and self.light_is_red(i)]

    def active_agents(self) -> list[AgentState]:
        return [a for a in self.agents if a.active]


def init_simulation(scene: SceneState, route: Route, cfg: SimConfig = SimConfig()) -> SimState:
    """Bind vehicles to lanes, place the ego at the origin and set up light phases."""
    index = LaneIndex(scene.graph)
    for i in route.lane_indices:
        if not 0 <= i < len(index):
            raise ValueError(f"route lane {i} is not in the scene graph")
    vx, vy = scene.ego_velocity
    ego = EgoState(speed=float(math.hypot(vx, vy)) * (1.0 if vx >= 0 else -1.0))
    agents = []
    for i, a in enumerate(scene.agents):
        st = AgentState(i, a.kind, tuple(a.extent), float(a.center[0]), float(a.center[1]), float(a.heading),
                        float(a.speed or 0.0))
        if a.kind is AgentKind.VEHICLE:
            try:
                st.lane, st.s = project_to_lane(a, index)
                st.x, st.y, st.heading = index.pose_at(st.lane, st.s)
            except LookupError:
                st.passive, st.speed = True, 0.0
                log.warning("vehicle %d has no lane within reach; kept as a static obstacle", i)
        elif a.kind is AgentKind.STATIC:
            st.passive = True
        agents.append(st)
    lights = []
    for pts, red in [(p, True) for p in scene.red_lights] + [(p, False) for p in scene.green_lights]:
        lt = LightState(np.asarray(pts, dtype=float), red)
        if len(index):
            lateral, s, heading = index.project([pts[0]])
            dh = np.abs(geo.wrap_angle(heading[0] - geo.start_heading(pts)))
            cost = np.where(dh < math.radians(PROJECTION_ANGLE_DEG), lateral[0], np.inf)
            k = int(np.argmin(cost))
            if cost[k] <= 0.5:
                lt.lane, lt.stop_s = k, float(s[0, k])
        lights.append(lt)
    state = SimState(scene, route, index, ego, agents, lights, cfg.dt, cfg.light_period)
    for a in agents:
        if a.passive and a.kind is AgentKind.VEHICLE:
            state.events.append(Event("vehicle_unprojectable", 0.0, {"agent": a.id}))
    _gate(state, cfg)
    _record(state)
    return state


def _gate(state: SimState, cfg: SimConfig) -> None:
    ex, ey = state.ego.x, state.ego.y
    for a in state.agents:
        a.active = math.hypot(a.x - ex, a.y - ey) < cfg.radius


def _record(state: SimState) -> None:
    t = state.clock
    e = state.ego
    state.trace.append((t, EGO_ID, "ego", e.x, e.y, e.heading, e.speed, True))
    for a in state.agents:
        state.trace.append((t, a.id, a.kind.value, a.x, a.y, a.heading, a.speed, a.active))


def _obstacles(state: SimState, cfg: SimConfig) -> list[list[tuple[float, float, float, object]]]:
    """Per lane: (arc position, half length, speed along lane, owner) of everything a vehicle may queue behind."""
    n = len(state.index)
    obs: list[list] = [[] for _ in range(n)]
    if n == 0:
        return obs
    for a in state.agents:
        if a.kind is AgentKind.VEHICLE and a.lane is not None and not a.offmap:
            obs[a.lane].append((a.s, a.extent[0] / 2.0, a.speed, a.id))
    probes = [(EGO_ID, state.ego.x, state.ego.y, state.ego.heading, state.ego.speed, state.ego.extent[0] / 2.0)]
    probes += [(a.id, a.x, a.y, a.heading, a.speed, a.extent[0] / 2.0)
               for a in state.agents if a.active and a.kind is AgentKind.PEDESTRIAN]
    lateral, s, heading = state.index.project([(p[1], p[2]) for p in probes])
    half_width = cfg.lane_width / 2.0
    for row, (owner, _, _, h, v, half) in enumerate(probes):
        for lane in np.flatnonzero(lateral[row] <= half_width):
            along = v * math.cos(h - heading[row, lane])
            obs[lane].append((float(s[row, lane]), half, max(along, 0.0), owner))
    for lane, stop in state.red_stop_points():
        obs[lane].append((stop, 0.0, 0.0, "light"))
    for lst in obs:
        lst.sort(key=lambda o: o[0])
    return obs


def _leader(state: SimState, a: AgentState, obstacles, lookahead: float) -> tuple[float, float]:
    """(gap, leader speed) ahead of vehicle ``a`` along its lowest-index successor path."""
    half = a.extent[0] / 2.0
    lane, offset = a.lane, -a.s
    for hop in range(16):
        for s_obs, half_obs, v_obs, owner in obstacles[lane]:
            if owner == a.id:
                continue
            if hop == 0:
                # lights only count while the vehicle front has not passed the stop line
                if s_obs <= a.s or (owner == "light" and s_obs < a.s + half):
                    continue
            return offset + s_obs - half - half_obs, v_obs
        offset += state.index.lengths[lane]
        lane = state.index.next_lane[lane]
        if lane is None or offset > lookahead:
            break
    return math.inf, 0.0


def step(state: SimState, action: EgoAction, cfg: SimConfig) -> SimState:
    """Advance the world by one ``dt`` (mutates and returns ``state``)."""
    if state.clock + cfg.dt > cfg.horizon + 1e-9:
        raise ValueError("simulation horizon exceeded")
    _gate(state, cfg)
    obstacles = _obstacles(state, cfg)
    dt = cfg.dt
    updates = []
    for a in state.agents:
        if not a.active or a.passive:
            continue
        if a.kind is AgentKind.VEHICLE and not a.offmap:
            gap, v_lead = _leader(state, a, obstacles, cfg.leader_lookahead)
            acc = idm_acceleration(a.speed, v_lead, gap, cfg.idm)
            ds, v_new = advance_longitudinal(a.speed, acc, dt)
            updates.append((a, ds, v_new))
        else:
            a.x += a.speed * math.cos(a.heading) * dt
            a.y += a.speed * math.sin(a.heading) * dt
    for a, ds, v_new in updates:
        a.speed = v_new
        s = a.s + ds
        while s > state.index.lengths[a.lane]:
            nxt = state.index.next_lane[a.lane]
            if nxt is None:
                break
            s -= state.index.lengths[a.lane]
            a.lane = nxt
        length = state.index.lengths[a.lane]
        if s > length:
            a.x, a.y, a.heading = state.index.pose_at(a.lane, length)
            a.x += (s - length) * math.cos(a.heading)
            a.y += (s - length) * math.sin(a.heading)
            a.offmap, a.s = True, length
        else:
            a.s = s
            a.x, a.y, a.heading = state.index.pose_at(a.lane, s)
    _move_ego(state.ego, action, cfg)
    state.step_count += 1
    _check_contacts(state, cfg)
    _record(state)
    return state


def _move_ego(ego: EgoState, action: EgoAction, cfg: SimConfig) -> None:
    lim, dt = cfg.ego, cfg.dt
    acc = min(max(action.acceleration, -lim.max_decel), lim.max_accel)
    kappa = min(max(action.curvature, -lim.max_curvature), lim.max_curvature)
    dk = lim.max_curvature_rate * dt
    kappa = min(max(kappa, ego.curvature - dk), ego.curvature + dk)
    v_new = min(max(ego.speed + acc * dt, lim.min_speed), lim.max_speed)
    v_avg = 0.5 * (ego.speed + v_new)
    mid = ego.heading + 0.5 * v_avg * kappa * dt
    ego.x += v_avg * math.cos(mid) * dt
    ego.y += v_avg * math.sin(mid) * dt
    ego.heading = float(geo.wrap_angle(ego.heading + v_avg * kappa * dt))
    ego.speed, ego.curvature = v_new, kappa


def contact_point(a_corners: np.ndarray, b_corners: np.ndarray) -> np.ndarray:
    """Representative contact point of two overlapping boxes."""
    inside = list(a_corners[geo.points_in_box(a_corners, b_corners)])
    inside += list(b_corners[geo.points_in_box(b_corners, a_corners)])
    if inside:
        return np.mean(inside, axis=0)
    return 0.5 * (a_corners.mean(axis=0) + b_corners.mean(axis=0))


def _check_contacts(state: SimState, cfg: SimConfig) -> None:
    ego = state.ego
    ego_box = ego.corners()
    reach = 0.5 * math.hypot(*ego.extent)
    t = state.clock
    touching = set()
    for a in state.agents:
        if math.hypot(a.x - ego.x, a.y - ego.y) > reach + 0.5 * math.hypot(*a.extent):
            continue
        box = a.corners()
        if geo.boxes_overlap(ego_box, box):
            touching.add(a.id)
            if a.id not in state.contacts:
                p = contact_point(ego_box, box)
                state.events.append(Event("collision", t, {"agent": a.id, "kind": a.kind.value,
                                                           "contact": [float(p[0]), float(p[1])],
                                                           "ego_speed": ego.speed}))
    state.contacts = touching
    off = state.index.distance((ego.x, ego.y)) > cfg.lane_width / 2.0 + 0.5
    if off and not state.off_road:
        state.events.append(Event("off_road", t, {"x": ego.x, "y": ego.y}))
    state.off_road = off


# --- trace and event files -------------------------------------------------


def write_trace(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for t, ident, kind, x, y, h, v, active in rows:
            w.writerow([repr(float(t)), ident, kind, repr(float(x)), repr(float(y)), repr(float(h)),
                        repr(float(v)), int(bool(active))])


def read_trace(path) -> list[tuple]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != TRACE_COLUMNS:
            raise ValueError(f"unexpected trace header {header}")
        for t, ident, kind, x, y, h, v, active in reader:
            ident = ident if ident == EGO_ID else int(ident)
            rows.append((float(t), ident, kind, float(x), float(y), float(h), float(v), active == "1"))
    return rows


def write_events(path, events) -> None:
    with open(path, "w") as fh:
        for ev in events:
            fh.write(json.dumps({"event": ev.event, "t": ev.t, "payload": ev.payload}, sort_keys=True) + "\n")


def read_events(path) -> list[Event]:
    with open(path) as fh:
        return [Event(d["event"], d["t"], d["payload"]) for d in map(json.loads, filter(str.strip, fh))]
