"""Vectorized scene state, its canonical file format, and rigid transforms.

Coordinates are bird's-eye-view meters in the ego frame: ego at the origin,
heading along +x, y to the left.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property
from typing import Sequence

import numpy as np

from lanesim import geometry as geo
from lanesim.geometry import POLYLINE_POINTS

DEFAULT_FOV = 64.0
CONNECT_DISTANCE = 1.5
CONNECT_ANGLE_DEG = 60.0
LIGHT_LANE_TOLERANCE = 0.5
MIN_CLIP_LENGTH = 0.5
EGO_EXTENT = (5.176, 2.297)  # length, width of the ego box
_FOV_SLACK = 1e-5


class SceneError(ValueError):
    """Raised when a scene document or scene object violates the schema or an invariant."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class AgentKind(str, Enum):
    PEDESTRIAN = "pedestrian"
    VEHICLE = "vehicle"
    STATIC = "static"


@dataclass(frozen=True)
class AgentBox:
    center: tuple[float, float]
    heading: float
    extent: tuple[float, float]  # length, width
    kind: AgentKind
    speed: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))
        object.__setattr__(self, "extent", (float(self.extent[0]), float(self.extent[1])))
        object.__setattr__(self, "heading", float(self.heading))
        object.__setattr__(self, "kind", AgentKind(self.kind))
        if self.speed is not None:
            object.__setattr__(self, "speed", float(self.speed))

    @property
    def velocity(self) -> np.ndarray:
        v = self.speed or 0.0
        return np.array([v * math.cos(self.heading), v * math.sin(self.heading)])

    @property
    def is_dynamic(self) -> bool:
        return self.kind is not AgentKind.STATIC

    def corners(self) -> np.ndarray:
        return geo.box_corners(self.center, self.heading, *self.extent)


def _frozen_array(values, dtype=float, shape_tail=None) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    if shape_tail is not None and arr.size == 0:
        arr = arr.reshape((0,) + shape_tail)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class LaneGraph:
    """Lane centerlines of shape (N, 20, 2) and a directed successor matrix.

    ``adjacency[i, j]`` is true iff lane ``j`` succeeds lane ``i``.
    """

    lanes: np.ndarray
    adjacency: np.ndarray | None = None

    def __post_init__(self):
        lanes = _frozen_array(self.lanes, shape_tail=(POLYLINE_POINTS, 2))
        if lanes.ndim != 3 or lanes.shape[1:] != (POLYLINE_POINTS, 2):
            raise SceneError("lanes", f"expected shape (N, {POLYLINE_POINTS}, 2), got {lanes.shape}")
        n = len(lanes)
        adj = np.zeros((n, n), dtype=bool) if self.adjacency is None else self.adjacency
        adj = _frozen_array(adj, dtype=bool, shape_tail=(0,))
        if adj.shape != (n, n):
            raise SceneError("adjacency", f"expected shape ({n}, {n}), got {adj.shape}")
        object.__setattr__(self, "lanes", lanes)
        object.__setattr__(self, "adjacency", adj)

    def __len__(self) -> int:
        return len(self.lanes)

    @classmethod
    def from_successors(cls, lanes, successors: Sequence[Sequence[int]]) -> "LaneGraph":
        lanes = np.asarray(lanes, dtype=float).reshape(-1, POLYLINE_POINTS, 2)
        adj = np.zeros((len(lanes), len(lanes)), dtype=bool)
        for i, succ in enumerate(successors):
            for j in succ:
                adj[i, j] = True
        return cls(lanes, adj)

    def successors(self, i: int) -> list[int]:
        return [int(j) for j in np.flatnonzero(self.adjacency[i])]

    def predecessors(self, j: int) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.adjacency[:, j])]

    @cached_property
    def lengths(self) -> np.ndarray:
        if len(self.lanes) == 0:
            return np.zeros(0)
        return np.linalg.norm(np.diff(self.lanes, axis=1), axis=2).sum(axis=1)

    def same_as(self, other: "LaneGraph", atol: float = 0.0) -> bool:
        return (
            self.lanes.shape == other.lanes.shape
            and np.allclose(self.lanes, other.lanes, rtol=0.0, atol=atol)
            and np.array_equal(self.adjacency, other.adjacency)
        )


@dataclass(frozen=True, eq=False)
class SceneState:
    graph: LaneGraph
    red_lights: np.ndarray = field(default_factory=lambda: np.zeros((0, POLYLINE_POINTS, 2)))
    green_lights: np.ndarray = field(default_factory=lambda: np.zeros((0, POLYLINE_POINTS, 2)))
    agents: tuple[AgentBox, ...] = ()
    ego_velocity: tuple[float, float] = (0.0, 0.0)
    fov: float = DEFAULT_FOV
    city: str | None = None

    def __post_init__(self):
        for name in ("red_lights", "green_lights"):
            arr = _frozen_array(getattr(self, name), shape_tail=(POLYLINE_POINTS, 2))
            if arr.ndim != 3 or arr.shape[1:] != (POLYLINE_POINTS, 2):
                raise SceneError(name, f"polyline length ≠ {POLYLINE_POINTS} (shape {arr.shape})")
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "agents", tuple(self.agents))
        object.__setattr__(self, "ego_velocity", (float(self.ego_velocity[0]), float(self.ego_velocity[1])))
        object.__setattr__(self, "fov", float(self.fov))

    @property
    def lanes(self) -> np.ndarray:
        return self.graph.lanes

    def agents_of(self, kind) -> list[AgentBox]:
        kind = AgentKind(kind)
        return [a for a in self.agents if a.kind is kind]

    def without_agents(self) -> "SceneState":
        return replace(self, agents=())

    def same_as(self, other: "SceneState", atol: float = 0.0) -> bool:
        def close(a, b):
            return np.shape(a) == np.shape(b) and np.allclose(a, b, rtol=0.0, atol=atol)

        if not (self.graph.same_as(other.graph, atol) and close(self.red_lights, other.red_lights)):
            return False
        if not close(self.green_lights, other.green_lights) or len(self.agents) != len(other.agents):
            return False
        if self.fov != other.fov or self.city != other.city:
            return False
        if not close(self.ego_velocity, other.ego_velocity):
            return False
        for a, b in zip(self.agents, other.agents):
            if a.kind is not b.kind or (a.speed is None) != (b.speed is None):
                return False
            if not close(a.center, b.center) or not close(a.extent, b.extent):
                return False
            if abs(geo.wrap_angle(a.heading - b.heading)) > atol:
                return False
            if a.speed is not None and abs(a.speed - b.speed) > atol:
                return False
        return True


@dataclass(frozen=True)
class Pose:
    """Placement of a child frame inside a parent frame."""

    x: float = 0.0
    y: float = 0.0
    heading: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "heading", geo.wrap_angle(self.heading))

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def to_local(self, points) -> np.ndarray:
        """Express parent-frame points in this pose's frame."""
        pts = np.asarray(points, dtype=float)
        return (pts - self.translation) @ geo.rotation(self.heading)

    def to_parent(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        return pts @ geo.rotation(self.heading).T + self.translation

    def inverse(self) -> "Pose":
        t = -self.translation @ geo.rotation(self.heading)
        return Pose(t[0], t[1], -self.heading)

    def compose(self, other: "Pose") -> "Pose":
        """``other`` is given in this pose's frame; return it in the parent frame."""
        t = self.to_parent(other.translation)
        return Pose(t[0], t[1], self.heading + other.heading)


# --- validation ------------------------------------------------------------


def check_polylines(arr, name: str) -> np.ndarray:
    arr = np.asarray(arr, dtype=float)
    if arr.size == 0:
        return arr.reshape(0, POLYLINE_POINTS, 2)
    if arr.ndim != 3 or arr.shape[2] != 2:
        raise SceneError(name, f"expected a list of point arrays, got shape {arr.shape}")
    if arr.shape[1] != POLYLINE_POINTS:
        raise SceneError(name, f"polyline length ≠ {POLYLINE_POINTS} (got {arr.shape[1]})")
    if not np.all(np.isfinite(arr)):
        raise SceneError(name, "non-finite coordinate")
    return arr


def lights_on_lanes(lights, lanes, tolerance: float = LIGHT_LANE_TOLERANCE) -> np.ndarray:
    """Mask of light polylines lying within ``tolerance`` of some single lane centerline."""
    lights = np.asarray(lights, dtype=float).reshape(-1, POLYLINE_POINTS, 2)
    lanes = np.asarray(lanes, dtype=float).reshape(-1, POLYLINE_POINTS, 2)
    if len(lanes) == 0:
        return np.zeros(len(lights), dtype=bool)
    seg_a, seg_b = lanes[:, :-1].reshape(-1, 2), lanes[:, 1:].reshape(-1, 2)
    out = np.empty(len(lights), dtype=bool)
    for i, pl in enumerate(lights):
        dist, _ = geo.point_segment_distance(pl, seg_a, seg_b)
        per_lane = dist.reshape(len(pl), len(lanes), -1).min(axis=2).max(axis=0)
        out[i] = per_lane.min() <= tolerance
    return out


def validate_scene(scene: SceneState) -> SceneState:
    """Check every scene invariant, raising :class:`SceneError` on the first violation."""
    half = scene.fov / 2.0 + _FOV_SLACK
    if not scene.fov > 0:
        raise SceneError("fov_m", "must be positive")
    lanes = check_polylines(scene.lanes, "lanes")
    for name, arr in (("lanes", lanes), ("red_lights", scene.red_lights), ("green_lights", scene.green_lights)):
        arr = check_polylines(arr, name)
        for i, pl in enumerate(arr):
            if not geo.polyline_length(pl) > 0.0:
                raise SceneError(f"{name}[{i}]", "zero arc length")
            if np.any(np.abs(pl) > half):
                raise SceneError(f"{name}[{i}]", "point outside the field of view")
    adj = scene.graph.adjacency
    if np.any(np.diag(adj)):
        raise SceneError("lanes.successors", "a lane cannot succeed itself")
    for i, j in zip(*np.nonzero(adj)):
        gap = float(np.linalg.norm(lanes[i, -1] - lanes[j, 0]))
        if gap > CONNECT_DISTANCE + 1e-6:
            raise SceneError(f"lanes[{i}].successors", f"successor {j} starts {gap:.3f} m from lane end")
    for name in ("red_lights", "green_lights"):
        on_lane = lights_on_lanes(getattr(scene, name), lanes)
        if not on_lane.all():
            i = int(np.argmin(on_lane))
            raise SceneError(f"{name}[{i}]", "does not coincide with any lane centerline")
    for i, a in enumerate(scene.agents):
        where = f"agents[{i}]"
        if not (a.extent[0] > 0 and a.extent[1] > 0):
            raise SceneError(where, "extent components must be positive")
        if a.kind is AgentKind.STATIC and a.speed is not None:
            raise SceneError(where, "static objects carry no speed")
        if a.kind is not AgentKind.STATIC and a.speed is None:
            raise SceneError(where, f"{a.kind.value} requires a speed")
        if a.speed is not None and a.speed < 0:
            raise SceneError(where, "speed must be non-negative")
        if max(abs(a.center[0]), abs(a.center[1])) > half:
            raise SceneError(where, "center outside the field of view")
        if not all(math.isfinite(v) for v in (*a.center, a.heading, *a.extent)):
            raise SceneError(where, "non-finite value")
    return scene


# --- serialization ---------------------------------------------------------


def _fmt_float(x: float) -> str:
    s = f"{x:.6f}"
    return "0.000000" if s == "-0.000000" else s


def _compact(obj) -> str:
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _fmt_float(float(obj))
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        return "{" + ", ".join(f"{json.dumps(k)}: {_compact(obj[k])}" for k in sorted(obj)) + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        return "[" + ", ".join(_compact(v) for v in obj) + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def scene_to_dict(scene: SceneState) -> dict:
    agents = []
    for a in scene.agents:
        d = {"kind": a.kind.value, "center": [a.center[0], a.center[1]], "heading": a.heading,
             "extent": [a.extent[0], a.extent[1]]}
        if a.speed is not None:
            d["speed"] = a.speed
        agents.append(d)
    lanes = [
        {"points": [[float(p[0]), float(p[1])] for p in lane], "successors": scene.graph.successors(i)}
        for i, lane in enumerate(scene.lanes)
    ]
    return {
        "agents": agents,
        "city": scene.city,
        "ego_velocity": [scene.ego_velocity[0], scene.ego_velocity[1]],
        "fov_m": scene.fov,
        "green_lights": [pl.tolist() for pl in scene.green_lights],
        "lanes": lanes,
        "red_lights": [pl.tolist() for pl in scene.red_lights],
    }


def save_scene(scene: SceneState) -> bytes:
    """Canonical serialization: sorted keys, one entity per line, 6-decimal floats."""
    doc = scene_to_dict(scene)
    lines = ["{"]
    keys = sorted(doc)
    for n, key in enumerate(keys):
        value = doc[key]
        tail = "," if n < len(keys) - 1 else ""
        if isinstance(value, list) and value and isinstance(value[0], (dict, list)):
            lines.append(f"  {json.dumps(key)}: [")
            for m, item in enumerate(value):
                sep = "," if m < len(value) - 1 else ""
                lines.append(f"    {_compact(item)}{sep}")
            lines.append(f"  ]{tail}")
        else:
            lines.append(f"  {json.dumps(key)}: {_compact(value)}{tail}")
    lines.append("}")
    return ("\n".join(lines) + "\n").encode("utf-8")


_REQUIRED_KEYS = ("fov_m", "city", "lanes", "red_lights", "green_lights", "agents", "ego_velocity")


def scene_from_dict(doc: dict) -> SceneState:
    if not isinstance(doc, dict):
        raise SceneError("<root>", "scene document must be an object")
    for key in _REQUIRED_KEYS:
        if key not in doc:
            raise SceneError(key, "missing key")
    unknown = set(doc) - set(_REQUIRED_KEYS)
    if unknown:
        raise SceneError(sorted(unknown)[0], "unknown key")
    lanes_doc = doc["lanes"]
    if not isinstance(lanes_doc, list):
        raise SceneError("lanes", "must be a list")
    pts, succ = [], []
    for i, lane in enumerate(lanes_doc):
        if not isinstance(lane, dict) or set(lane) != {"points", "successors"}:
            raise SceneError(f"lanes[{i}]", "expected keys 'points' and 'successors'")
        p = np.asarray(lane["points"], dtype=float)
        if p.ndim != 2 or p.shape[1] != 2:
            raise SceneError(f"lanes[{i}].points", "expected a list of [x, y] pairs")
        if len(p) != POLYLINE_POINTS:
            raise SceneError(f"lanes[{i}].points", f"polyline length ≠ {POLYLINE_POINTS} (got {len(p)})")
        s = lane["successors"]
        if not isinstance(s, list) or not all(isinstance(j, int) and not isinstance(j, bool) for j in s):
            raise SceneError(f"lanes[{i}].successors", "must be a list of lane indices")
        if any(j < 0 or j >= len(lanes_doc) for j in s):
            raise SceneError(f"lanes[{i}].successors", "lane index out of range")
        pts.append(p)
        succ.append(s)
    graph = LaneGraph.from_successors(np.array(pts).reshape(-1, POLYLINE_POINTS, 2), succ)
    lights = {}
    for name in ("red_lights", "green_lights"):
        if not isinstance(doc[name], list):
            raise SceneError(name, "must be a list")
        for i, pl in enumerate(doc[name]):
            if np.asarray(pl, dtype=float).shape != (POLYLINE_POINTS, 2):
                raise SceneError(f"{name}[{i}]", f"polyline length ≠ {POLYLINE_POINTS}")
        lights[name] = np.asarray(doc[name], dtype=float).reshape(-1, POLYLINE_POINTS, 2)
    agents = []
    if not isinstance(doc["agents"], list):
        raise SceneError("agents", "must be a list")
    for i, a in enumerate(doc["agents"]):
        where = f"agents[{i}]"
        if not isinstance(a, dict):
            raise SceneError(where, "must be an object")
        missing = {"kind", "center", "heading", "extent"} - set(a)
        if missing:
            raise SceneError(f"{where}.{sorted(missing)[0]}", "missing key")
        try:
            kind = AgentKind(a["kind"])
        except ValueError:
            raise SceneError(f"{where}.kind", f"unknown kind {a['kind']!r}") from None
        if len(a["center"]) != 2 or len(a["extent"]) != 2:
            raise SceneError(where, "center and extent must be 2-vectors")
        agents.append(AgentBox(tuple(a["center"]), a["heading"], tuple(a["extent"]), kind, a.get("speed")))
    ev = doc["ego_velocity"]
    if not isinstance(ev, list) or len(ev) != 2:
        raise SceneError("ego_velocity", "must be a 2-vector")
    city = doc["city"]
    if city is not None and not isinstance(city, str):
        raise SceneError("city", "must be a string or null")
    return SceneState(graph, lights["red_lights"], lights["green_lights"], tuple(agents),
                      (float(ev[0]), float(ev[1])), float(doc["fov_m"]), city)


def load_scene(data) -> SceneState:
    """Parse and validate a serialized scene (bytes or str)."""
    if isinstance(data, (bytes, bytearray)):
        data = data.decode("utf-8")
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as exc:
        raise SceneError("<root>", f"not a valid scene document: {exc}") from None
    return validate_scene(scene_from_dict(doc))


# --- transforms and clipping -----------------------------------------------


def clip_polyline(points: np.ndarray, polygon: np.ndarray, min_length: float = MIN_CLIP_LENGTH,
                  min_chord: float = 0.0):
    """Pieces of a polyline inside a convex polygon.

    Returns a list of ``(s0, s1, points)``; a polyline entirely inside comes back
    untouched as a single piece, clipped pieces are resampled to 20 points. Clipped
    pieces shorter than ``min_length`` or whose end-to-start chord does not exceed
    ``min_chord`` are dropped.
    """
    cum = geo.arc_lengths(points)
    total = cum[-1]
    pieces = []
    for s0, s1 in geo.inside_intervals(points, polygon, cum):
        if s0 <= 0.0 and s1 >= total:
            pieces.append((0.0, total, np.array(points, dtype=float)))
        elif s1 - s0 >= min_length:
            sub = geo.sub_polyline(points, s0, s1, cum)
            if np.linalg.norm(sub[-1] - sub[0]) > min_chord:
                pieces.append((s0, s1, geo.resample_polyline(sub)))
    return pieces


def crop_lanes(lanes, successors, polygon, min_length: float = MIN_CLIP_LENGTH, min_chord: float = 0.0):
    """Clip lanes to a convex region and remap successor relations onto the pieces.

    A connection survives iff the predecessor's piece keeps its original end and the
    successor's piece keeps its original start. Returns ``(pieces, successors, origin)``
    where ``origin[k]`` is the index of the source lane of piece ``k``.
    """
    out, origin, first, last = [], [], {}, {}
    for i, lane in enumerate(lanes):
        lane = np.asarray(lane, dtype=float)
        total = geo.polyline_length(lane)
        pieces = clip_polyline(lane, polygon, min_length, min_chord)
        for n, (s0, s1, pts) in enumerate(pieces):
            k = len(out)
            out.append(pts)
            origin.append(i)
            if n == 0 and s0 <= 1e-9:
                first[i] = k
            if n == len(pieces) - 1 and s1 >= total - 1e-9:
                last[i] = k
    succ = [[] for _ in out]
    for i, js in enumerate(successors):
        if i not in last:
            continue
        for j in js:
            if j in first:
                succ[last[i]].append(first[j])
    return out, [sorted(s) for s in succ], origin


def transform_scene(scene: SceneState, pose: Pose) -> SceneState:
    """Re-express a scene in the frame of ``pose`` and crop it to the field of view.

    Polylines crossing the boundary are clipped and resampled to 20 points, pieces
    shorter than 0.5 m are dropped, and boxes survive iff their center is inside.
    """
    window = geo.square_polygon(side=scene.fov)
    lanes = [pose.to_local(lane) for lane in scene.lanes]
    pieces, succ, _ = crop_lanes(lanes, [scene.graph.successors(i) for i in range(len(lanes))], window)
    graph = LaneGraph.from_successors(np.array(pieces).reshape(-1, POLYLINE_POINTS, 2), succ)

    def lights(arr):
        kept = []
        for pl in arr:
            kept.extend(p for _, _, p in clip_polyline(pose.to_local(pl), window))
        return np.array(kept).reshape(-1, POLYLINE_POINTS, 2)

    half = scene.fov / 2.0
    agents = []
    for a in scene.agents:
        c = pose.to_local(np.array(a.center))
        if abs(c[0]) <= half + 1e-9 and abs(c[1]) <= half + 1e-9:
            agents.append(replace(a, center=(c[0], c[1]), heading=geo.wrap_angle(a.heading - pose.heading)))
    v = np.array(scene.ego_velocity) @ geo.rotation(pose.heading)
    return SceneState(graph, lights(scene.red_lights), lights(scene.green_lights), tuple(agents),
                      (v[0], v[1]), scene.fov, scene.city)
