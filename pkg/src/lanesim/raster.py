"""Rasterized state images (12-channel BEV rasters) and skeleton-based vectorization."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from lanesim import geometry as geo
from lanesim.lanegraph import recover_adjacency
from lanesim.scene import DEFAULT_FOV, EGO_EXTENT, AgentKind, LaneGraph, SceneState, lights_on_lanes

ENTITY_GROUPS = ("lanes", "red_lights", "green_lights", "pedestrians", "vehicles", "static_objects")
POLYLINE_GROUPS = ENTITY_GROUPS[:3]
N_CHANNELS = 2 * len(ENTITY_GROUPS)
_KIND_GROUP = {AgentKind.PEDESTRIAN: "pedestrians", AgentKind.VEHICLE: "vehicles",
               AgentKind.STATIC: "static_objects"}
RSI_MAGIC = b"RSI1"
PRUNE_LENGTH = 3.0
_BINARIZE = 0.5


def channels(group: str) -> slice:
    k = ENTITY_GROUPS.index(group)
    return slice(2 * k, 2 * k + 2)


@dataclass(frozen=True)
class RasterConfig:
    width: int = 256
    height: int = 256
    fov: float = DEFAULT_FOV
    line_thickness: int = 1

    def __post_init__(self):
        if self.width != self.height:
            raise ValueError("raster must be square (width == height)")
        if self.width <= 0 or self.fov <= 0 or self.line_thickness < 1:
            raise ValueError("width, fov and line_thickness must be positive")

    @property
    def resolution(self) -> float:
        return self.fov / self.width


@dataclass(eq=False)
class Rsi:
    """Raster of shape (height, width, 12); two channels per entity group.

    ``occupancy`` is a per-group coverage mask kept beside the values so stationary
    boxes (velocity [0, 0]) can be told apart from background in tests.
    """

    data: np.ndarray
    resolution: float
    occupancy: np.ndarray | None = None

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def fov(self) -> float:
        return self.width * self.resolution

    def group(self, name: str) -> np.ndarray:
        return self.data[..., channels(name)]

    def pixel_of(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Row and column of the pixels containing BEV points (clamped to the image)."""
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        half = self.fov / 2.0
        col = np.floor((pts[:, 0] + half) / self.resolution).astype(int)
        row = np.floor((half - pts[:, 1]) / self.resolution).astype(int)
        return np.clip(row, 0, self.height - 1), np.clip(col, 0, self.width - 1)

    def pixel_centers(self, rows, cols) -> np.ndarray:
        half = self.fov / 2.0
        x = (np.asarray(cols) + 0.5) * self.resolution - half
        y = half - (np.asarray(rows) + 0.5) * self.resolution
        return np.column_stack([x, y])


def _line_cells(r0, c0, r1, c1):
    n = max(abs(r1 - r0), abs(c1 - c0))
    if n == 0:
        return np.array([r0]), np.array([c0])
    t = np.arange(n + 1) / n
    return (np.floor(r0 + t * (r1 - r0) + 0.5).astype(int), np.floor(c0 + t * (c1 - c0) + 0.5).astype(int))


def _draw_polyline(rsi: Rsi, points: np.ndarray, group: str, thickness: int):
    sl = channels(group)
    occ = rsi.occupancy[..., ENTITY_GROUPS.index(group)]
    rows, cols = rsi.pixel_of(points)
    pad = (thickness - 1) // 2
    for k in range(len(points) - 1):
        d = points[k + 1] - points[k]
        norm = math.hypot(d[0], d[1])
        if norm == 0.0:
            continue
        rr, cc = _line_cells(rows[k], cols[k], rows[k + 1], cols[k + 1])
        if pad:
            offs = np.arange(-pad, pad + 1)
            rr = (rr[:, None, None] + offs[None, :, None]).repeat(len(offs), axis=2).ravel()
            cc = (cc[:, None, None] + offs[None, None, :]).repeat(len(offs), axis=1).ravel()
            keep = (rr >= 0) & (rr < rsi.height) & (cc >= 0) & (cc < rsi.width)
            rr, cc = rr[keep], cc[keep]
        rsi.data[rr, cc, sl] = d / norm
        occ[rr, cc] = True


def _draw_box(rsi: Rsi, center, heading, extent, value, group: str):
    corners = geo.box_corners(center, heading, *extent)
    r, c = rsi.pixel_of(corners)
    rows = np.arange(r.min(), r.max() + 1)
    cols = np.arange(c.min(), c.max() + 1)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    rr, cc = rr.ravel(), cc.ravel()
    inside = geo.points_in_box(rsi.pixel_centers(rr, cc), corners)
    rr, cc = rr[inside], cc[inside]
    if len(rr) == 0:
        rr, cc = rsi.pixel_of(center)
    rsi.data[rr, cc, channels(group)] = value
    rsi.occupancy[rr, cc, ENTITY_GROUPS.index(group)] = True


def rasterize(scene: SceneState, cfg: RasterConfig | None = None) -> Rsi:
    """Encode a scene into a 12-channel raster.

    Polylines write unit direction vectors toward their successor point, dynamic
    boxes their velocity in m/s, static boxes their unit orientation vector. The
    ego is drawn first as a vehicle at the origin carrying the ego velocity; agents
    follow in list order, later ones overwriting earlier ones.
    """
    cfg = cfg or RasterConfig()
    rsi = Rsi(np.zeros((cfg.height, cfg.width, N_CHANNELS), dtype=np.float32), cfg.resolution,
              np.zeros((cfg.height, cfg.width, len(ENTITY_GROUPS)), dtype=bool))
    for group, lines in (("lanes", scene.lanes), ("red_lights", scene.red_lights),
                         ("green_lights", scene.green_lights)):
        for pl in lines:
            _draw_polyline(rsi, pl, group, cfg.line_thickness)
    _draw_box(rsi, (0.0, 0.0), 0.0, EGO_EXTENT, np.asarray(scene.ego_velocity), "vehicles")
    for a in scene.agents:
        if a.kind is AgentKind.STATIC:
            value = np.array([math.cos(a.heading), math.sin(a.heading)])
        else:
            value = a.velocity
        _draw_box(rsi, a.center, a.heading, a.extent, value, _KIND_GROUP[a.kind])
    return rsi


# --- binary file format ----------------------------------------------------


def rsi_to_bytes(rsi: Rsi) -> bytes:
    header = RSI_MAGIC + struct.pack("<IIIf", rsi.width, rsi.height, N_CHANNELS, rsi.resolution)
    return header + np.ascontiguousarray(rsi.data, dtype="<f4").tobytes()


def rsi_from_bytes(blob: bytes) -> Rsi:
    if blob[:4] != RSI_MAGIC:
        raise ValueError("not an RSI file (bad magic)")
    width, height, nch, res = struct.unpack("<IIIf", blob[4:20])
    if nch != N_CHANNELS:
        raise ValueError(f"expected {N_CHANNELS} channels, got {nch}")
    expected = width * height * nch * 4
    if len(blob) - 20 != expected:
        raise ValueError(f"RSI payload has {len(blob) - 20} bytes, expected {expected}")
    data = np.frombuffer(blob, dtype="<f4", offset=20).reshape(height, width, nch).astype(np.float32)
    occ = np.stack([np.any(data[..., 2 * k:2 * k + 2] != 0, axis=2) for k in range(len(ENTITY_GROUPS))], axis=2)
    return Rsi(data, float(res), occ)


# --- thinning and tracing --------------------------------------------------


def zhang_suen(mask: np.ndarray) -> np.ndarray:
    """Zhang-Suen thinning of a boolean image."""
    img = np.pad(np.asarray(mask, dtype=bool), 1).astype(np.uint8)
    while True:
        changed = False
        for step in (0, 1):
            p2 = img[:-2, 1:-1]
            p3 = img[:-2, 2:]
            p4 = img[1:-1, 2:]
            p5 = img[2:, 2:]
            p6 = img[2:, 1:-1]
            p7 = img[2:, :-2]
            p8 = img[1:-1, :-2]
            p9 = img[:-2, :-2]
            ring = [p2, p3, p4, p5, p6, p7, p8, p9, p2]
            b = p2 + p3 + p4 + p5 + p6 + p7 + p8 + p9
            a = sum(((ring[k] == 0) & (ring[k + 1] == 1)).astype(np.uint8) for k in range(8))
            if step == 0:
                c = (p2 * p4 * p6 == 0) & (p4 * p6 * p8 == 0)
            else:
                c = (p2 * p4 * p8 == 0) & (p2 * p6 * p8 == 0)
            remove = (img[1:-1, 1:-1] == 1) & (b >= 2) & (b <= 6) & (a == 1) & c
            if remove.any():
                img[1:-1, 1:-1][remove] = 0
                changed = True
        if not changed:
            return img[1:-1, 1:-1].astype(bool)


_ORTHO = ((-1, 0), (0, 1), (1, 0), (0, -1))
_DIAG = ((-1, 1), (1, 1), (1, -1), (-1, -1))


def _neighbours(skel: np.ndarray, r: int, c: int):
    """Mixed (m-)adjacency: diagonal links only where no orthogonal path exists."""
    h, w = skel.shape

    def on(rr, cc):
        return 0 <= rr < h and 0 <= cc < w and skel[rr, cc]

    out = [(r + dr, c + dc) for dr, dc in _ORTHO if on(r + dr, c + dc)]
    for dr, dc in _DIAG:
        if on(r + dr, c + dc) and not on(r + dr, c) and not on(r, c + dc):
            out.append((r + dr, c + dc))
    return out


def trace_skeleton(skel: np.ndarray) -> list[list[tuple[float, float]]]:
    """Split a one-pixel skeleton into paths between end and junction nodes.

    Paths are returned as (row, col) sequences; pixels of a junction cluster are
    replaced by the cluster centroid so paths meeting there share an endpoint.
    """
    pixels = list(zip(*np.nonzero(skel)))
    nbrs = {p: _neighbours(skel, *p) for p in pixels}
    node = {p for p in pixels if len(nbrs[p]) != 2}
    cluster: dict = {}
    for p in sorted(node):
        if p in cluster or len(nbrs[p]) < 3:
            continue
        stack, members = [p], []
        cluster[p] = p
        while stack:
            q = stack.pop()
            members.append(q)
            for n in nbrs[q]:
                if n in node and len(nbrs[n]) >= 3 and n not in cluster:
                    cluster[n] = p
                    stack.append(n)
        centroid = tuple(np.mean(members, axis=0))
        for q in members:
            cluster[q] = centroid

    def coord(p):
        return cluster.get(p, (float(p[0]), float(p[1])))

    visited: set = set()
    used_links: set = set()
    paths = []
    for start in sorted(node):
        if not nbrs[start]:
            continue
        for first in nbrs[start]:
            if first in cluster and start in cluster and cluster[first] == cluster[start]:
                continue
            if first in visited or frozenset((start, first)) in used_links:
                continue
            path = [start, first]
            prev, cur = start, first
            while cur not in node:
                visited.add(cur)
                nxt = [n for n in nbrs[cur] if n != prev]
                prev, cur = cur, nxt[0]
                path.append(cur)
            used_links.add(frozenset((path[-2], path[-1])))
            used_links.add(frozenset((start, first)))
            paths.append([coord(p) for p in path])
    for p in pixels:  # closed loops without any node
        if p in node or p in visited:
            continue
        path = [p]
        visited.add(p)
        prev, cur = p, nbrs[p][0]
        while cur != p:
            visited.add(cur)
            path.append(cur)
            nxt = [n for n in nbrs[cur] if n != prev]
            prev, cur = cur, nxt[0]
        path.append(p)
        paths.append([coord(q) for q in path])
    return paths


def skeleton_vectorize(rsi: Rsi, channel_group: str = "lanes", prune_length: float = PRUNE_LENGTH) -> list[np.ndarray]:
    """Recover 20-point polylines from a polyline channel group.

    The group is binarized, thinned, split into node-to-node paths, each path is
    oriented to agree with the majority of stored direction vectors, and paths
    shorter than ``prune_length`` meters are dropped.
    """
    if channel_group not in POLYLINE_GROUPS:
        raise ValueError(f"channel group must be one of {POLYLINE_GROUPS}, got {channel_group!r}")
    field = rsi.group(channel_group).astype(float)
    mask = np.linalg.norm(field, axis=2) > _BINARIZE
    if not mask.any():
        return []
    skel = zhang_suen(mask)
    out = []
    for path in trace_skeleton(skel):
        rc = np.array(path, dtype=float)
        pts = rsi.pixel_centers(rc[:, 0], rc[:, 1])
        keep = np.ones(len(pts), dtype=bool)
        keep[1:] = np.any(np.diff(pts, axis=0) != 0, axis=1)
        pts = pts[keep]
        if len(pts) < 2 or geo.polyline_length(pts) < prune_length:
            continue
        steps = np.diff(pts, axis=0)
        ri = np.clip(np.rint(rc[keep][:-1, 0]).astype(int), 0, rsi.height - 1)
        ci = np.clip(np.rint(rc[keep][:-1, 1]).astype(int), 0, rsi.width - 1)
        stored = field[ri, ci]
        agree = np.einsum("ij,ij->i", steps, stored) > 0
        if agree.sum() < len(agree) / 2.0:
            pts = pts[::-1]
        out.append(geo.resample_polyline(pts))
    return out


def vectorize_scene(rsi: Rsi, prune_length: float = PRUNE_LENGTH) -> SceneState:
    """Polyline content of a raster as a scene: lanes with recovered adjacency plus lights."""
    def stack(group):
        lines = skeleton_vectorize(rsi, group, prune_length)
        return np.array(lines).reshape(-1, 20, 2)

    lanes = stack("lanes")
    # light skeletons can drift off the lane skeleton at pruned ends; keep only valid ones
    red, green = stack("red_lights"), stack("green_lights")
    red, green = red[lights_on_lanes(red, lanes)], green[lights_on_lanes(green, lanes)]
    return SceneState(LaneGraph(lanes, recover_adjacency(lanes)), red, green, fov=rsi.fov)


# --- SVG debug rendering ---------------------------------------------------

_GROUP_COLORS = ("#555555", "#d62728", "#2ca02c", "#9467bd", "#1f77b4", "#8c564b")


def rsi_to_svg(rsi: Rsi) -> str:
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{rsi.width}" height="{rsi.height}" '
             f'viewBox="0 0 {rsi.width} {rsi.height}"><rect width="100%" height="100%" fill="white"/>']
    occ = rsi.occupancy if rsi.occupancy is not None else np.stack(
        [np.any(rsi.data[..., 2 * k:2 * k + 2] != 0, axis=2) for k in range(len(ENTITY_GROUPS))], axis=2)
    for k, color in enumerate(_GROUP_COLORS):
        for r, c in zip(*np.nonzero(occ[..., k])):
            parts.append(f'<rect x="{c}" y="{r}" width="1" height="1" fill="{color}"/>')
    parts.append("</svg>")
    return "\n".join(parts)


def scene_to_svg(scene: SceneState, scale: float = 8.0) -> str:
    half = scene.fov / 2.0
    size = scene.fov * scale

    def xy(p):
        return f"{(p[0] + half) * scale:.2f},{(half - p[1]) * scale:.2f}"

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size:.0f}" height="{size:.0f}">',
             '<rect width="100%" height="100%" fill="white"/>']
    for lines, color in ((scene.lanes, "#555555"), (scene.red_lights, "#d62728"), (scene.green_lights, "#2ca02c")):
        for pl in lines:
            parts.append(f'<polyline points="{" ".join(xy(p) for p in pl)}" fill="none" stroke="{color}" stroke-width="2"/>')
    for a in scene.agents:
        color = _GROUP_COLORS[3 + list(_KIND_GROUP).index(a.kind)]
        parts.append(f'<polygon points="{" ".join(xy(p) for p in a.corners())}" fill="{color}" opacity="0.8"/>')
    ego = geo.box_corners((0.0, 0.0), 0.0, *EGO_EXTENT)
    parts.append(f'<polygon points="{" ".join(xy(p) for p in ego)}" fill="#ff7f0e"/>')
    parts.append("</svg>")
    return "\n".join(parts)


# --- estimator wrappers ----------------------------------------------------


class Rasterizer(TransformerMixin, BaseEstimator):
    """Scenes -> array of shape (n_scenes, width, width, 12)."""

    def __init__(self, width=256, fov=DEFAULT_FOV, line_thickness=1):
        self.width = width
        self.fov = fov
        self.line_thickness = line_thickness

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        from lanesim.validation import check_scenes

        cfg = RasterConfig(self.width, self.width, self.fov, self.line_thickness)
        scenes = check_scenes(X)
        if not scenes:
            return np.zeros((0, self.width, self.width, N_CHANNELS), dtype=np.float32)
        return np.stack([rasterize(s, cfg).data for s in scenes])


class SkeletonVectorizer(TransformerMixin, BaseEstimator):
    """Rasters (arrays or :class:`Rsi`) -> lane graphs with recovered adjacency."""

    def __init__(self, channel_group="lanes", prune_length=PRUNE_LENGTH, fov=DEFAULT_FOV):
        self.channel_group = channel_group
        self.prune_length = prune_length
        self.fov = fov

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        if isinstance(X, Rsi):
            X = [X]
        elif isinstance(X, np.ndarray) and X.ndim == 3:
            X = X[None]
        graphs = []
        for item in X:
            if not isinstance(item, Rsi):
                arr = np.asarray(item, dtype=np.float32)
                if arr.ndim != 3 or arr.shape[2] != N_CHANNELS or arr.shape[0] != arr.shape[1]:
                    raise ValueError(f"expected rasters of shape (W, W, {N_CHANNELS}), got {arr.shape}")
                item = Rsi(arr, self.fov / arr.shape[1])
            lines = np.array(skeleton_vectorize(item, self.channel_group, self.prune_length)).reshape(-1, 20, 2)
            graphs.append(LaneGraph(lines, recover_adjacency(lines)))
        return graphs
