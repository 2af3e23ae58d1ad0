"""Procedural driving worlds, scene sampling, traffic sampling and route extrapolation.

A world is an unbounded, seeded road network described by dense lane polylines.
Scenes are square crops of it. Extrapolation places tiles one after another along
a selected route; each tile keeps everything already generated inside its window
(the known region) and only adds lane pieces and agents in the unexplored part.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from lanesim import geometry as geo
from lanesim.lanegraph import Route, enumerate_routes, nearest_lane, rank_routes
from lanesim.scene import (CONNECT_DISTANCE, EGO_EXTENT, MIN_CLIP_LENGTH, AgentBox, AgentKind, LaneGraph, Pose,
                           SceneState, clip_polyline, crop_lanes)

log = logging.getLogger(__name__)

LAYOUTS = ("straight", "curve", "intersection", "grid")
LANE_WIDTH = 3.7
STOP_DISTANCE = 16.0
SPLIT_SPACING = 30.0
ARC_POINTS = 48
MIN_RADIUS = 10.0
MIN_HEADWAY = 10.0
MAX_VEHICLE_SPEED = 12.0
EGO_CLEARANCE = 8.0
# Pieces whose chord is within the connection tolerance are dropped: a dropped stub then
# leaves a gap that adjacency recovery bridges, and no kept stub can fake an edge.
MIN_CHORD = CONNECT_DISTANCE

_DIRS = {"E": (1.0, 0.0), "N": (0.0, 1.0), "W": (-1.0, 0.0), "S": (0.0, -1.0)}
_LEFT_OF = {"E": "N", "N": "W", "W": "S", "S": "E"}
_RIGHT_OF = {v: k for k, v in _LEFT_OF.items()}
_STEP = {"E": (1, 0), "N": (0, 1), "W": (-1, 0), "S": (0, -1)}


class GenerationError(ValueError):
    """Raised for infeasible generator configurations."""


@dataclass(frozen=True)
class GenConfig:
    seed: int = 0
    layout: str = "intersection"
    lane_count: tuple[int, int] = (1, 2)  # lanes per direction, inclusive range
    agent_density: float = 4.0  # vehicles per 100 m of lane
    light_probability: float = 0.7
    pedestrian_count: tuple[int, int] = (0, 4)
    static_count: tuple[int, int] = (0, 2)
    fov: float = 64.0

    def __post_init__(self):
        if self.layout not in LAYOUTS:
            raise GenerationError(f"layout must be one of {LAYOUTS}, got {self.layout!r}")
        lo, hi = self.lane_count
        if lo < 1 or hi < lo:
            raise GenerationError(f"infeasible lane_count {self.lane_count} for layout {self.layout!r}")
        if hi > 2:
            raise GenerationError("at most 2 lanes per direction are supported")
        if self.agent_density < 0:
            raise GenerationError("agent_density must be non-negative")
        if not self.fov > 0:
            raise GenerationError("fov must be positive")
        if not 0.0 <= self.light_probability <= 1.0:
            raise GenerationError("light_probability must lie in [0, 1]")


@dataclass(frozen=True)
class WorldLane:
    key: tuple
    points: np.ndarray
    successors: tuple = ()
    light: tuple | None = None  # (intersection, axis) for signalised connectors


def _bbox_overlap(a, b) -> bool:
    return not (a[1][0] < b[0][0] or b[1][0] < a[0][0] or a[1][1] < b[0][1] or b[1][1] < a[0][1])


def _bbox(points) -> tuple:
    pts = np.asarray(points)
    return (pts.min(axis=0), pts.max(axis=0))


class RoadWorld:
    """A single road: straight, optionally bending once by a circular arc.

    The ego lane runs along y = 0 before the bend; extra forward lanes lie to its
    right, oncoming lanes to its left. Long straight stretches are split every
    ``SPLIT_SPACING`` meters so lanes chain into successor lists.
    """

    def __init__(self, forward: int, backward: int, start: float, radius: float = 0.0, angle: float = 0.0):
        self.offsets = [("f", k, -k * LANE_WIDTH) for k in range(forward)]
        self.offsets += [("b", k, (k + 1) * LANE_WIDTH) for k in range(backward)]
        self.start = start
        self.radius = radius
        self.angle = angle  # signed, left positive
        self.arc_length = radius * abs(angle)

    def _ref(self, u: float, d: float) -> np.ndarray:
        if u <= 0.0 or self.arc_length == 0.0:
            if u <= 0.0:
                return np.array([self.start + u, d])
        sigma = math.copysign(1.0, self.angle) if self.angle else 1.0
        if u <= self.arc_length:
            psi = sigma * u / self.radius
            ref = np.array([self.start + self.radius * math.sin(u / self.radius),
                            sigma * self.radius * (1.0 - math.cos(u / self.radius))])
        else:
            psi = self.angle
            end = np.array([self.start + self.radius * math.sin(self.arc_length / self.radius),
                            sigma * self.radius * (1.0 - math.cos(self.arc_length / self.radius))]) \
                if self.arc_length else np.array([self.start, 0.0])
            ref = end + (u - self.arc_length) * np.array([math.cos(psi), math.sin(psi)])
        return ref + d * np.array([-math.sin(psi), math.cos(psi)])

    def _span(self, m: int) -> tuple[float, float]:
        if m < 0:
            return m * SPLIT_SPACING, (m + 1) * SPLIT_SPACING
        if m == 0:
            return 0.0, self.arc_length
        return self.arc_length + (m - 1) * SPLIT_SPACING, self.arc_length + m * SPLIT_SPACING

    def _pieces(self):
        return (lambda m: m != 0 or self.arc_length > 0.0)

    def lanes_in(self, bbox) -> list[WorldLane]:
        reach = float(np.abs(np.asarray(bbox)).max()) * 1.5 + abs(self.start) + self.arc_length + 2 * SPLIT_SPACING
        m_max = int(math.ceil(reach / SPLIT_SPACING)) + 1
        valid = self._pieces()
        ms = [m for m in range(-m_max, m_max + 1) if valid(m)]
        out = []
        for kind, k, d in self.offsets:
            for idx, m in enumerate(ms):
                u0, u1 = self._span(m)
                n = ARC_POINTS if m == 0 else 2
                pts = np.array([self._ref(u, d) for u in np.linspace(u0, u1, n)])
                if kind == "f":
                    nxt = ms[idx + 1] if idx + 1 < len(ms) else m + 1
                    succ = ((("road", kind, k, nxt)),)
                else:
                    pts = pts[::-1]
                    prv = ms[idx - 1] if idx > 0 else m - 1
                    succ = ((("road", kind, k, prv)),)
                if _bbox_overlap(_bbox(pts), bbox):
                    out.append(WorldLane(("road", kind, k, m), pts, succ))
        return out


class GridWorld:
    """Manhattan street network: four-way intersections joined by two-way roads.

    With ``single=True`` there is one intersection whose arms run to infinity.
    Connectors inside an intersection go straight from every lane, turn left from
    the innermost lane and right from the outermost one.
    """

    def __init__(self, lanes: int, spacing: float, x0: float, seed: int, light_probability: float,
                 single: bool = False):
        self.n = lanes
        self.spacing = spacing
        self.x0 = x0
        self.y0 = LANE_WIDTH / 2.0
        self.seed = seed
        self.light_probability = light_probability
        self.single = single
        self._signals: dict[tuple[int, int], tuple[bool, bool]] = {}

    def center(self, i: int, j: int) -> np.ndarray:
        return np.array([self.x0 + i * self.spacing, self.y0 + j * self.spacing])

    def signal(self, i: int, j: int) -> tuple[bool, bool]:
        """(signalised, east-west approaches start green) for an intersection."""
        if (i, j) not in self._signals:
            self._signals[i, j] = self._draw_signal(i, j)
        return self._signals[i, j]

    def _draw_signal(self, i: int, j: int) -> tuple[bool, bool]:
        rng = np.random.default_rng([self.seed, 101, i + 2 ** 20, j + 2 ** 20])
        return bool(rng.random() < self.light_probability), bool(rng.random() < 0.5)

    @staticmethod
    def _lane_offset(h: str, k: int) -> np.ndarray:
        hx, hy = _DIRS[h]
        return (LANE_WIDTH / 2.0 + k * LANE_WIDTH) * np.array([hy, -hx])

    def stop_point(self, i, j, h, k):
        return self.center(i, j) - STOP_DISTANCE * np.array(_DIRS[h]) + self._lane_offset(h, k)

    def exit_point(self, i, j, h, k):
        return self.center(i, j) + STOP_DISTANCE * np.array(_DIRS[h]) + self._lane_offset(h, k)

    def _turns(self, k):
        turns = ["S"]
        if k == 0:
            turns.append("L")
        if k == self.n - 1:
            turns.append("R")
        return turns

    def _connector(self, i, j, h_in, k, turn) -> WorldLane:
        h_out = {"S": h_in, "L": _LEFT_OF[h_in], "R": _RIGHT_OF[h_in]}[turn]
        p0 = self.stop_point(i, j, h_in, k)
        p1 = self.exit_point(i, j, h_out, k)
        if turn == "S":
            pts = np.array([p0, p1])
        else:
            d_in = np.array(_DIRS[h_in])
            rel = p1 - p0
            radius = float(rel @ d_in)
            normal = (rel - radius * d_in) / radius
            ctr = p0 + radius * normal
            a0 = math.atan2(*(p0 - ctr)[::-1])
            a1 = math.atan2(*(p1 - ctr)[::-1])
            da = geo.wrap_angle(a1 - a0)
            ang = a0 + np.linspace(0.0, da, ARC_POINTS)
            pts = ctr + radius * np.column_stack([np.cos(ang), np.sin(ang)])
            pts[0], pts[-1] = p0, p1
        if self.single:
            succ = (("arm_out", h_out, k, 1),)
        else:
            succ = (("block", i, j, h_out, k),)
        signalised, ew_green = self.signal(i, j)
        light = ((i, j), "ew" if h_in in "EW" else "ns") if signalised else None
        return WorldLane(("x", i, j, h_in, k, turn), pts, succ, light)

    def _approach_successors(self, i, j, h, k):
        return tuple(("x", i, j, h, k, t) for t in self._turns(k))

    def light_is_red(self, light) -> bool:
        (i, j), axis = light
        _, ew_green = self.signal(i, j)
        return ew_green != (axis == "ew")

    def lanes_in(self, bbox) -> list[WorldLane]:
        lo, hi = np.asarray(bbox[0]), np.asarray(bbox[1])
        out = []
        if self.single:
            cells = [(0, 0)]
        else:
            pad = self.spacing
            i0 = int(math.floor((lo[0] - pad - self.x0) / self.spacing))
            i1 = int(math.ceil((hi[0] + pad - self.x0) / self.spacing))
            j0 = int(math.floor((lo[1] - pad - self.y0) / self.spacing))
            j1 = int(math.ceil((hi[1] + pad - self.y0) / self.spacing))
            cells = [(i, j) for i in range(i0, i1 + 1) for j in range(j0, j1 + 1)]
        box = (lo, hi)
        reach = STOP_DISTANCE + self.n * LANE_WIDTH
        for i, j in cells:
            c = self.center(i, j)
            if _bbox_overlap((c - reach, c + reach), box):
                for h in "ENWS":
                    for k in range(self.n):
                        for t in self._turns(k):
                            out.append(self._connector(i, j, h, k, t))
            if self.single:
                continue
            for h in "ENWS":
                di, dj = _STEP[h]
                for k in range(self.n):
                    p0 = self.exit_point(i, j, h, k)
                    p1 = self.stop_point(i + di, j + dj, h, k)
                    if _bbox_overlap(_bbox([p0, p1]), box):
                        out.append(WorldLane(("block", i, j, h, k), np.array([p0, p1]),
                                             self._approach_successors(i + di, j + dj, h, k)))
        if self.single:
            far = float(np.abs(np.concatenate([lo, hi]) - np.concatenate([self.center(0, 0)] * 2)).max())
            m_max = int(math.ceil((far * 1.5 + STOP_DISTANCE) / SPLIT_SPACING)) + 1
            for h in "ENWS":
                d = np.array(_DIRS[h])
                for k in range(self.n):
                    stop = self.stop_point(0, 0, h, k)
                    exit_ = self.exit_point(0, 0, h, k)
                    for m in range(1, m_max + 1):
                        pts_in = np.array([stop - m * SPLIT_SPACING * d, stop - (m - 1) * SPLIT_SPACING * d])
                        succ_in = self._approach_successors(0, 0, h, k) if m == 1 else (("arm_in", h, k, m - 1),)
                        out.append(WorldLane(("arm_in", h, k, m), pts_in, succ_in))
                        pts_out = np.array([exit_ + (m - 1) * SPLIT_SPACING * d, exit_ + m * SPLIT_SPACING * d])
                        out.append(WorldLane(("arm_out", h, k, m), pts_out, (("arm_out", h, k, m + 1),)))
        return [wl for wl in out if _bbox_overlap(_bbox(wl.points), (lo, hi))]


def make_world(cfg: GenConfig, rng: np.random.Generator):
    lo, hi = cfg.lane_count
    n = int(rng.integers(lo, hi + 1))
    if cfg.layout == "straight":
        return RoadWorld(n, int(rng.integers(lo, hi + 1)), start=float(rng.uniform(2.0, SPLIT_SPACING - 2.0)))
    if cfg.layout == "curve":
        sign = 1.0 if rng.random() < 0.5 else -1.0
        radius = float(rng.uniform(MIN_RADIUS + 2 * LANE_WIDTH + 0.5, 28.0))
        angle = sign * math.radians(float(rng.uniform(60.0, 100.0)))
        return RoadWorld(n, n, start=float(rng.uniform(4.0, 16.0)), radius=radius, angle=angle)
    if cfg.layout == "intersection":
        x0 = float(rng.uniform(STOP_DISTANCE + 6.0, STOP_DISTANCE + 18.0))
        return GridWorld(n, 0.0, x0, cfg.seed, cfg.light_probability, single=True)
    spacing = float(rng.uniform(44.0, 56.0))
    x0 = float(rng.uniform(STOP_DISTANCE + 3.0, spacing - STOP_DISTANCE - 3.0))
    return GridWorld(n, spacing, x0, cfg.seed, cfg.light_probability)


# --- agent placement -------------------------------------------------------


def _lane_frame(points, cum, s):
    p = geo.interpolate(points, cum, s)
    k = min(max(int(np.searchsorted(cum, s, side="right")) - 1, 0), len(points) - 2)
    d = points[k + 1] - points[k]
    return p, math.atan2(d[1], d[0])


def place_agents(lanes, rng: np.random.Generator, density: float, pedestrians: int = 0, statics: int = 0,
                 inside=None, existing=(), clear_center=(0.0, 0.0)) -> list[AgentBox]:
    """Sample non-overlapping vehicles on lanes plus pedestrians and static objects beside them.

    Vehicles sit on centerlines with lane-aligned headings, at least 10 m apart on
    the same lane, with speeds uniform in [0, 12] m/s. Nothing is placed within
    8 m of ``clear_center`` or overlapping the ego box there.
    """
    lanes = [np.asarray(pl, dtype=float) for pl in lanes]
    placed: list[AgentBox] = []
    boxes = [a.corners() for a in existing]
    centers = [np.asarray(a.center) for a in existing]
    if clear_center is not None:
        boxes.append(geo.box_corners(clear_center, 0.0, *EGO_EXTENT))
        centers.append(np.asarray(clear_center, dtype=float))
    clear = np.asarray(clear_center, dtype=float) if clear_center is not None else None

    def free(box_corners, center, radius):
        if inside is not None and not inside(center):
            return False
        if clear is not None and np.linalg.norm(center - clear) < EGO_CLEARANCE:
            return False
        for c, b in zip(centers, boxes):
            if np.linalg.norm(center - c) < radius + 6.0 and geo.boxes_overlap(box_corners, b):
                return False
        return True

    def accept(agent):
        placed.append(agent)
        boxes.append(agent.corners())
        centers.append(np.asarray(agent.center))

    for pl in lanes:
        cum = geo.arc_lengths(pl)
        total = cum[-1]
        count = int(rng.poisson(density * total / 100.0))
        taken: list[float] = []
        for _ in range(count):
            s = float(rng.uniform(0.0, total))
            extent = (float(rng.uniform(4.2, 5.2)), float(rng.uniform(1.8, 2.1)))
            speed = float(rng.uniform(0.0, MAX_VEHICLE_SPEED))
            if any(abs(s - t) < MIN_HEADWAY for t in taken):
                continue
            p, h = _lane_frame(pl, cum, s)
            corners = geo.box_corners(p, h, *extent)
            if free(corners, p, extent[0]):
                taken.append(s)
                accept(AgentBox((p[0], p[1]), h, extent, AgentKind.VEHICLE, speed))
    if not lanes:
        return placed
    for kind, count in ((AgentKind.PEDESTRIAN, pedestrians), (AgentKind.STATIC, statics)):
        for _ in range(count):
            for _attempt in range(10):
                pl = lanes[int(rng.integers(len(lanes)))]
                cum = geo.arc_lengths(pl)
                s = float(rng.uniform(0.0, cum[-1]))
                side = 1.0 if rng.random() < 0.5 else -1.0
                p, h = _lane_frame(pl, cum, s)
                normal = np.array([-math.sin(h), math.cos(h)])
                p = p + side * (LANE_WIDTH / 2.0 + 2.5) * normal
                if kind is AgentKind.PEDESTRIAN:
                    extent = (0.6, 0.6)
                    heading = h if rng.random() < 0.5 else geo.wrap_angle(h + math.pi)
                    speed = float(rng.uniform(0.5, 1.5))
                else:
                    extent = (float(rng.uniform(0.5, 2.5)), float(rng.uniform(0.5, 1.5)))
                    heading = float(rng.uniform(-math.pi, math.pi))
                    speed = None
                if geo.distance_to_polylines(p, lanes)[0] < LANE_WIDTH / 2.0 + 1.0:
                    continue
                corners = geo.box_corners(p, heading, *extent)
                if free(corners, p, extent[0]):
                    accept(AgentBox((p[0], p[1]), heading, extent, kind, speed))
                    break
    return placed


# --- stitching -------------------------------------------------------------


@dataclass
class _Piece:
    key: tuple
    s0: float
    s1: float
    total: float
    points: np.ndarray
    tile: int


class _Stitcher:
    """Accumulates lane pieces, lights and agents of consecutive tiles in the world frame."""

    def __init__(self, cfg: GenConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.world = make_world(cfg, rng)
        self.ego_velocity = (float(rng.uniform(0.0, 8.0)), 0.0)
        self.pieces: list[_Piece] = []
        self.successors: dict[tuple, tuple] = {}
        self.kept: dict[tuple, list[tuple[float, float]]] = {}
        self.lights: list[tuple[np.ndarray, bool]] = []
        self.agents: list[AgentBox] = []
        self.poses: list[Pose] = []
        self.squares: list[np.ndarray] = []

    def add_tile(self, pose: Pose, with_agents: bool = True) -> None:
        k = len(self.poses)
        square = geo.square_polygon(pose.translation, pose.heading, self.cfg.fov)
        first_new = len(self.pieces)
        for wl in self.world.lanes_in(_bbox(square)):
            cum = geo.arc_lengths(wl.points)
            total = float(cum[-1])
            spans = geo.inside_intervals(wl.points, square, cum)
            kept = self.kept.get(wl.key)
            if kept:
                spans = geo.subtract_intervals(spans, kept)
            subs = []
            for s0, s1 in spans:
                pts = wl.points if (s0 <= 0.0 and s1 >= total) else geo.sub_polyline(wl.points, s0, s1, cum)
                if s1 - s0 >= MIN_CLIP_LENGTH and np.linalg.norm(pts[-1] - pts[0]) > MIN_CHORD:
                    subs.append((s0, s1, pts))
            if not subs:
                continue
            self.successors[wl.key] = wl.successors
            self.kept[wl.key] = geo.merge_intervals(list(kept or []) + [(s0, s1) for s0, s1, _ in subs])
            for s0, s1, pts in subs:
                pts = geo.resample_polyline(pts)
                self.pieces.append(_Piece(wl.key, s0, s1, total, pts, k))
                if wl.light is not None:
                    self.lights.append((pts, self.world.light_is_red(wl.light)))
        self.poses.append(pose)
        self.squares.append(square)
        if with_agents:
            rng = np.random.default_rng([self.cfg.seed, k, 1])
            prev_all = list(self.squares[:-1])

            def inside(p):
                if not geo.points_in_box(p, square)[0]:
                    return False
                return not any(_strictly_inside(p, sq) for sq in prev_all)

            lo_p, hi_p = self.cfg.pedestrian_count
            lo_s, hi_s = self.cfg.static_count
            new = place_agents([pc.points for pc in self.pieces[first_new:]], rng, self.cfg.agent_density,
                               int(rng.integers(lo_p, hi_p + 1)), int(rng.integers(lo_s, hi_s + 1)),
                               inside=inside, existing=self.agents,
                               clear_center=(0.0, 0.0) if k == 0 else None)
            self.agents.extend(new)

    def snapshot(self) -> tuple:
        return (len(self.pieces), len(self.lights), len(self.agents), len(self.poses),
                {k: list(v) for k, v in self.kept.items()}, dict(self.successors))

    def restore(self, snap: tuple) -> None:
        n_pieces, n_lights, n_agents, n_tiles, kept, successors = snap
        del self.pieces[n_pieces:], self.lights[n_lights:], self.agents[n_agents:]
        del self.poses[n_tiles:], self.squares[n_tiles:]
        self.kept = {k: list(v) for k, v in kept.items()}
        self.successors = dict(successors)

    def successor_lists(self) -> list[list[int]]:
        """Intended adjacency between stitched pieces.

        A piece continues into the next kept piece of the same world lane, or into
        the first kept piece of a successor lane, when only a dropped stub lies in
        between (the end-to-start gap is within the connection tolerance).
        """
        by_key: dict[tuple, list[int]] = {}
        for idx, pc in enumerate(self.pieces):
            by_key.setdefault(pc.key, []).append(idx)
        for key in by_key:
            by_key[key].sort(key=lambda i: self.pieces[i].s0)
        succ = []
        for pc in self.pieces:
            later = [i for i in by_key[pc.key] if self.pieces[i].s0 >= pc.s1]
            if later:
                cands = [(later[0], self.pieces[later[0]].s0 - pc.s1)]
            else:
                cands = [(by_key[key][0], pc.total - pc.s1 + self.pieces[by_key[key][0]].s0)
                         for key in self.successors.get(pc.key, ()) if key in by_key]
            out = [j for j, skipped in cands
                   if skipped <= 2.0 * CONNECT_DISTANCE
                   and np.linalg.norm(self.pieces[j].points[0] - pc.points[-1]) <= CONNECT_DISTANCE]
            succ.append(sorted(out))
        return succ

    def graph(self) -> LaneGraph:
        lanes = np.array([pc.points for pc in self.pieces]).reshape(-1, 20, 2)
        return LaneGraph.from_successors(lanes, self.successor_lists())

    def world_scene(self, ego_velocity=None) -> SceneState:
        graph = self.graph()
        coords = [graph.lanes.reshape(-1, 2)] + [np.array([a.center]) for a in self.agents]
        extent = float(np.abs(np.vstack(coords)).max()) if len(graph) or self.agents else 0.0
        fov = max(self.cfg.fov, 2.0 * math.ceil(extent + 1.0))
        red = np.array([p for p, r in self.lights if r]).reshape(-1, 20, 2)
        green = np.array([p for p, r in self.lights if not r]).reshape(-1, 20, 2)
        ev = self.ego_velocity if ego_velocity is None else ego_velocity
        return SceneState(graph, red, green, tuple(self.agents), ev, fov)

    def tile_scene(self, k: int) -> tuple[SceneState, list[int]]:
        """Scene of tile ``k`` in its own frame and the stitched index behind every lane."""
        pose, square = self.poses[k], self.squares[k]
        lanes = [pc.points for pc in self.pieces]
        pieces, succ, origin = crop_lanes(lanes, self.successor_lists(), square, min_chord=MIN_CHORD)
        local = np.array([pose.to_local(p) for p in pieces]).reshape(-1, 20, 2)
        graph = LaneGraph.from_successors(local, succ)
        red, green = [], []
        for pts, is_red in self.lights:
            for _, _, piece in clip_polyline(pts, square, min_chord=MIN_CHORD):
                (red if is_red else green).append(pose.to_local(piece))
        agents = []
        for a in self.agents:
            if geo.points_in_box(a.center, square)[0]:
                c = pose.to_local(np.array(a.center))
                agents.append(replace(a, center=(c[0], c[1]), heading=geo.wrap_angle(a.heading - pose.heading)))
        # later tiles assume the ego arrives along the route at its initial speed
        v = np.array(self.ego_velocity) if k == 0 else np.array([np.linalg.norm(self.ego_velocity), 0.0])
        scene = SceneState(graph, np.array(red).reshape(-1, 20, 2), np.array(green).reshape(-1, 20, 2),
                           tuple(agents), (v[0], v[1]), self.cfg.fov)
        return scene, origin


def _strictly_inside(p, square, margin: float = 1e-6) -> bool:
    pts = np.asarray(p, dtype=float).reshape(-1, 2)[0]
    for k in range(4):
        a, b = square[k], square[(k + 1) % 4]
        edge = (b - a) / np.linalg.norm(b - a)
        if edge[0] * (pts[1] - a[1]) - edge[1] * (pts[0] - a[0]) <= margin:
            return False
    return True


def generate_scene(cfg: GenConfig) -> SceneState:
    """Deterministic procedural scene for a configuration (the seed fixes everything)."""
    st = _Stitcher(cfg)
    st.add_tile(Pose())
    return st.tile_scene(0)[0]


def sample_traffic(scene: SceneState, seed: int, difficulty: str = "easy", k: int = 8,
                   density: float = 4.0, pedestrians: tuple[int, int] = (0, 4),
                   statics: tuple[int, int] = (0, 2)) -> SceneState:
    """Populate a lane-only scene with agents.

    ``easy`` draws a single placement; ``hard`` draws ``k`` seeded placements and keeps
    the one with the most agents (the first on ties, so ``k=1`` matches ``easy``).
    """
    if difficulty not in ("easy", "hard"):
        raise ValueError(f"difficulty must be 'easy' or 'hard', got {difficulty!r}")
    if len(scene.graph) == 0:
        return scene
    half = scene.fov / 2.0

    def inside(p):
        return abs(p[0]) <= half and abs(p[1]) <= half

    best = None
    for i in range(1 if difficulty == "easy" else k):
        rng = np.random.default_rng([seed, i])
        n_ped = int(rng.integers(pedestrians[0], pedestrians[1] + 1))
        n_static = int(rng.integers(statics[0], statics[1] + 1))
        agents = place_agents(scene.lanes, rng, density, n_ped, n_static, inside=inside, existing=scene.agents)
        if best is None or len(agents) > len(best):
            best = agents
    return replace(scene, agents=tuple(scene.agents) + tuple(best))


# --- route extrapolation ---------------------------------------------------


@dataclass
class TileChain:
    tiles: list[tuple[Pose, SceneState]]
    graph: LaneGraph  # stitched, world frame (= frame of the first tile)
    route: Route  # over stitched lanes
    tile_routes: list[Route] = field(default_factory=list)
    status: str = "complete"
    world: SceneState | None = None

    @property
    def route_length(self) -> float:
        return self.route.length(self.graph)


def _start_lane(graph: LaneGraph, first: bool) -> tuple[int, float]:
    if first:
        i = nearest_lane(graph, (0.0, 0.0), heading=0.0)
        _, s, _ = geo.project_to_polyline((0.0, 0.0), graph.lanes[i])
        return i, s
    best, best_d = None, math.inf
    for i, pl in enumerate(graph.lanes):
        d = float(np.linalg.norm(pl[0]))
        if d <= 1.5 and abs(geo.start_heading(pl)) < math.radians(60.0) and d < best_d:
            best, best_d = i, d
    if best is None:
        raise LookupError("no lane continues the route at the tile origin")
    return best, 0.0


def _candidate_routes(st: "_Stitcher", k: int, scene: SceneState, difficulty: str) -> list[Route]:
    """Ranked routes of tile ``k`` that end at the window edge in unexplored space."""
    try:
        start, entry = _start_lane(scene.graph, k == 0)
    except LookupError:
        return []
    pose, earlier = st.poses[k], st.squares[:k]
    limit = st.cfg.fov / 2.0 - 2.0 * CONNECT_DISTANCE

    def leaves_window(r: Route) -> bool:
        end = scene.lanes[r.lane_indices[-1]][-1]
        if max(abs(end[0]), abs(end[1])) < limit:
            return False
        world_end = pose.to_parent(end)
        return not any(geo.points_in_box(world_end, sq)[0] for sq in earlier)

    routes = [replace(r, entry_offset=entry) for r in enumerate_routes(scene.graph, start) if leaves_window(r)]
    return rank_routes(scene.graph, routes, difficulty)


@dataclass
class _Frame:
    pose: Pose
    snap: tuple
    scene: SceneState
    origin: list[int]
    candidates: list[Route]
    idx: int = 0

    @property
    def route(self) -> Route:
        return self.candidates[self.idx]

    def next_pose(self) -> Pose:
        last = self.scene.lanes[self.route.lane_indices[-1]]
        return self.pose.compose(Pose(last[-1][0], last[-1][1], geo.end_heading(last)))


def _global_lanes(frames: list[_Frame]) -> list[int]:
    out: list[int] = []
    for f in frames:
        if not f.candidates:
            continue
        for i in f.route.lane_indices:
            if not out or out[-1] != f.origin[i]:
                out.append(f.origin[i])
    return out


def _grow(st: _Stitcher, n_tiles, difficulty, target_length, with_agents, max_branch, backtrack):
    frames: list[_Frame] = []
    budget = 4 * n_tiles + 8
    pose = Pose()
    while True:
        k = len(frames)
        snap = st.snapshot()
        st.add_tile(pose, with_agents=with_agents)
        scene, origin = st.tile_scene(k)
        cands = _candidate_routes(st, k, scene, difficulty)[:max_branch]
        frames.append(_Frame(pose, snap, scene, origin, cands))
        budget -= 1
        if cands:
            if len(frames) == n_tiles:
                return frames, "complete"
            if target_length is not None:
                lanes = _global_lanes(frames)
                length = sum(geo.polyline_length(st.pieces[i].points) for i in lanes)
                if length - frames[0].route.entry_offset >= target_length:
                    return frames, "complete"
        else:
            if not backtrack:
                return frames, "truncated"
            if budget <= 0:
                return None, "truncated"
            st.restore(frames.pop().snap)
            while frames and frames[-1].idx + 1 >= len(frames[-1].candidates):
                st.restore(frames.pop().snap)
            if not frames:
                return None, "truncated"
            frames[-1].idx += 1
        pose = frames[-1].next_pose()


def extrapolate_route(cfg: GenConfig, n_tiles: int, difficulty: str = "easy",
                      target_length: float | None = None, with_agents: bool = True,
                      max_branch: int = 3) -> TileChain:
    """Grow a chain of tiles along a route chosen tile by tile.

    Each next tile is placed at the end of the current tile's selected route
    (``select_route`` ranking with the given difficulty, restricted to routes that
    leave the window into unexplored space). Everything already generated inside the
    new window is kept as is. When a tile offers no such route, the previous tile
    falls back to its next-ranked route (at most ``max_branch`` per tile, bounded
    total effort). Stops after ``n_tiles`` tiles or once the stitched route reaches
    ``target_length``. If no continuation exists, the greedy chain is returned up to
    its dead end with status ``"truncated"``.
    """
    if n_tiles < 1:
        raise ValueError("n_tiles must be >= 1")
    st = _Stitcher(cfg)
    frames, status = _grow(st, n_tiles, difficulty, target_length, with_agents, max_branch, backtrack=True)
    if frames is None:
        st = _Stitcher(cfg)
        frames, status = _grow(st, n_tiles, difficulty, target_length, with_agents, 1, backtrack=False)
        log.warning("extrapolation truncated after %d tiles: no route continues into unexplored space",
                    len(frames))
    lanes = _global_lanes(frames)
    entry = frames[0].route.entry_offset if frames[0].candidates else 0.0
    return TileChain(tiles=[(f.pose, f.scene) for f in frames], graph=st.graph(),
                     route=Route(tuple(lanes), entry if lanes else 0.0),
                     tile_routes=[f.route for f in frames if f.candidates], status=status,
                     world=st.world_scene())
