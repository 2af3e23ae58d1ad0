"""Planar geometry helpers shared by the scene, raster, metric and simulation code."""

from __future__ import annotations

import math

import numpy as np
from scipy.spatial import cKDTree

POLYLINE_POINTS = 20
_EPS = 1e-9


def wrap_angle(angle):
    """Wrap an angle (scalar or array) to the half-open interval (-pi, pi]."""
    wrapped = np.remainder(np.asarray(angle, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    wrapped = np.where(wrapped <= -np.pi, wrapped + 2.0 * np.pi, wrapped)
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


def rotation(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def arc_lengths(points: np.ndarray) -> np.ndarray:
    """Cumulative arc length at every vertex, starting at 0."""
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(seg)])


def polyline_length(points: np.ndarray) -> float:
    return float(np.linalg.norm(np.diff(points, axis=0), axis=1).sum())


def segment_headings(points: np.ndarray) -> np.ndarray:
    d = np.diff(points, axis=0)
    return np.arctan2(d[:, 1], d[:, 0])


def start_heading(points: np.ndarray) -> float:
    d = _first_nonzero_segment(points)
    return math.atan2(d[1], d[0])


def end_heading(points: np.ndarray) -> float:
    d = _first_nonzero_segment(points[::-1])
    return math.atan2(-d[1], -d[0])


def _first_nonzero_segment(points):
    for k in range(len(points) - 1):
        d = points[k + 1] - points[k]
        if d[0] != 0.0 or d[1] != 0.0:
            return d
    return np.array([1.0, 0.0])


def heading_change(points: np.ndarray) -> float:
    """Signed cumulative heading change along a polyline, in radians."""
    h = segment_headings(_drop_repeats(points))
    if len(h) < 2:
        return 0.0
    return float(np.sum(wrap_angle(np.diff(h))))


def _drop_repeats(points: np.ndarray) -> np.ndarray:
    keep = np.ones(len(points), dtype=bool)
    keep[1:] = np.any(np.diff(points, axis=0) != 0.0, axis=1)
    return points[keep]


def resample_polyline(points, n: int = POLYLINE_POINTS) -> np.ndarray:
    """Resample a polyline to ``n`` points spaced uniformly by arc length.

    The first and last input points are reproduced exactly.

    Raises
    ------
    ValueError
        If fewer than two points are given or the polyline has zero length.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
        raise ValueError("resample_polyline needs at least 2 points of shape (k, 2)")
    if n < 2:
        raise ValueError("resample_polyline needs n >= 2")
    pts = _drop_repeats(pts)
    if len(pts) < 2:
        raise ValueError("cannot resample a zero-length polyline")
    cum = arc_lengths(pts)
    total = cum[-1]
    if not total > 0.0:
        raise ValueError("cannot resample a zero-length polyline")
    targets = np.linspace(0.0, total, n)
    out = np.column_stack([np.interp(targets, cum, pts[:, 0]), np.interp(targets, cum, pts[:, 1])])
    out[0] = pts[0]
    out[-1] = pts[-1]
    return out


def interpolate(points: np.ndarray, cum: np.ndarray, s: float) -> np.ndarray:
    """Point at arc position ``s`` along a polyline with cumulative lengths ``cum``."""
    if s <= 0.0:
        return points[0].copy()
    if s >= cum[-1]:
        return points[-1].copy()
    k = int(np.searchsorted(cum, s, side="right")) - 1
    k = min(max(k, 0), len(points) - 2)
    seg = cum[k + 1] - cum[k]
    if seg <= 0.0:
        return points[k].copy()
    u = (s - cum[k]) / seg
    return points[k] + u * (points[k + 1] - points[k])


def sub_polyline(points: np.ndarray, s0: float, s1: float, cum: np.ndarray | None = None) -> np.ndarray:
    """Portion of a polyline between arc positions ``s0 < s1``."""
    if cum is None:
        cum = arc_lengths(points)
    inner = points[(cum > s0) & (cum < s1)]
    return np.vstack([interpolate(points, cum, s0), inner, interpolate(points, cum, s1)])


def point_segment_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray):
    """Distances from every point to every segment.

    Returns ``(dist, t)`` with shape ``(len(points), len(a))``, where ``t`` is the
    clamped foot-point parameter along each segment.
    """
    p = np.asarray(points, dtype=float)[:, None, :]
    ab = b - a
    denom = np.einsum("ij,ij->i", ab, ab)
    denom = np.where(denom > 0.0, denom, 1.0)
    t = np.clip(np.einsum("mkj,kj->mk", p - a[None], ab) / denom, 0.0, 1.0)
    foot = a[None] + t[..., None] * ab[None]
    return np.linalg.norm(p - foot, axis=2), t


def project_to_polyline(point, points: np.ndarray, cum: np.ndarray | None = None):
    """Project a point onto a polyline.

    Returns ``(distance, arc_position, segment_index)``.
    """
    if cum is None:
        cum = arc_lengths(points)
    dist, t = point_segment_distance(np.asarray(point, dtype=float)[None], points[:-1], points[1:])
    k = int(np.argmin(dist[0]))
    seg = cum[k + 1] - cum[k]
    return float(dist[0, k]), float(cum[k] + t[0, k] * seg), k


def distance_to_polylines(points, polylines, max_distance: float | None = None) -> np.ndarray:
    """Minimum distance from each point to any segment of a stack of polylines.

    With ``max_distance`` only segments that can lie within that distance are
    examined, and points with no such segment get ``inf``.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(polylines) == 0 or len(pts) == 0:
        return np.full(len(pts), np.inf)
    a, b = polyline_segments(polylines)
    if max_distance is None:
        dist, _ = point_segment_distance(pts, a, b)
        return dist.min(axis=1)
    mid = 0.5 * (a + b)
    reach = max_distance + 0.5 * float(np.linalg.norm(b - a, axis=1).max())
    pairs = cKDTree(pts).sparse_distance_matrix(cKDTree(mid), reach, output_type="ndarray")
    i, k = pairs["i"].astype(int), pairs["j"].astype(int)
    out = np.full(len(pts), np.inf)
    if len(i) == 0:
        return out
    ab = b[k] - a[k]
    denom = np.einsum("ij,ij->i", ab, ab)
    denom = np.where(denom > 0.0, denom, 1.0)
    t = np.clip(np.einsum("ij,ij->i", pts[i] - a[k], ab) / denom, 0.0, 1.0)
    d = np.linalg.norm(pts[i] - (a[k] + t[:, None] * ab), axis=1)
    np.minimum.at(out, i, d)
    out[out > max_distance] = np.inf
    return out


def polyline_segments(polylines):
    """Flatten a sequence of polylines into segment start/end arrays."""
    a = np.concatenate([np.asarray(p, dtype=float)[:-1] for p in polylines])
    b = np.concatenate([np.asarray(p, dtype=float)[1:] for p in polylines])
    return a, b


# --- convex clipping -------------------------------------------------------


def square_polygon(center=(0.0, 0.0), heading: float = 0.0, side: float = 64.0) -> np.ndarray:
    """Counter-clockwise corners of a square of side ``side`` placed at a pose."""
    h = side / 2.0
    local = np.array([[-h, -h], [h, -h], [h, h], [-h, h]])
    return local @ rotation(heading).T + np.asarray(center, dtype=float)


def inside_intervals(points: np.ndarray, polygon: np.ndarray, cum: np.ndarray | None = None):
    """Arc-length intervals along a polyline lying inside a convex CCW polygon.

    Boundary points count as inside. Intervals are returned sorted and merged.
    """
    if cum is None:
        cum = arc_lengths(points)
    edges_a = polygon
    edges_b = np.roll(polygon, -1, axis=0)
    normals = np.column_stack([edges_b[:, 1] - edges_a[:, 1], edges_a[:, 0] - edges_b[:, 0]])
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    offsets = np.einsum("ij,ij->i", normals, edges_a)
    # a point p is inside iff normals @ p - offsets <= 0 for every edge
    intervals: list[list[float]] = []
    for k in range(len(points) - 1):
        seg_len = cum[k + 1] - cum[k]
        if seg_len <= 0.0:
            continue
        p0, p1 = points[k], points[k + 1]
        f0 = normals @ p0 - offsets
        f1 = normals @ p1 - offsets
        lo, hi = 0.0, 1.0
        empty = False
        for e in range(len(f0)):
            a0, a1 = f0[e], f1[e]
            if a0 <= _EPS and a1 <= _EPS:
                continue
            if a0 > _EPS and a1 > _EPS:
                empty = True
                break
            u = a0 / (a0 - a1)
            if a0 > _EPS:
                lo = max(lo, u)
            else:
                hi = min(hi, u)
            if lo > hi:
                empty = True
                break
        if empty:
            continue
        s0 = cum[k] + lo * seg_len
        s1 = cum[k] + hi * seg_len
        if lo == 0.0:
            s0 = cum[k]
        if hi == 1.0:
            s1 = cum[k + 1]
        if intervals and s0 <= intervals[-1][1]:
            intervals[-1][1] = max(intervals[-1][1], s1)
        else:
            intervals.append([s0, s1])
    return [(a, b) for a, b in intervals]


def subtract_intervals(base, removed):
    """Set difference of two sorted, merged interval lists."""
    out = []
    for a, b in base:
        pieces = [(a, b)]
        for c, d in removed:
            nxt = []
            for x, y in pieces:
                if d <= x or c >= y:
                    nxt.append((x, y))
                    continue
                if c > x:
                    nxt.append((x, c))
                if d < y:
                    nxt.append((d, y))
            pieces = nxt
        out.extend(pieces)
    return out


def merge_intervals(intervals):
    merged: list[list[float]] = []
    for a, b in sorted(intervals):
        if merged and a <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], b)
        else:
            merged.append([a, b])
    return [(a, b) for a, b in merged]


# --- oriented boxes --------------------------------------------------------


def box_corners(center, heading: float, length: float, width: float) -> np.ndarray:
    """Corners of an oriented rectangle in counter-clockwise order."""
    c, s = math.cos(heading), math.sin(heading)
    fwd = np.array([c, s]) * (length / 2.0)
    left = np.array([-s, c]) * (width / 2.0)
    ctr = np.asarray(center, dtype=float)
    return np.array([ctr + fwd - left, ctr + fwd + left, ctr - fwd + left, ctr - fwd - left])


def boxes_overlap(corners_a: np.ndarray, corners_b: np.ndarray) -> bool:
    """Separating-axis test for two convex quadrilaterals (touching counts as overlap)."""
    for poly in (corners_a, corners_b):
        edges = np.roll(poly, -1, axis=0) - poly
        for ex, ey in edges[:2]:
            axis = np.array([-ey, ex])
            pa = corners_a @ axis
            pb = corners_b @ axis
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True


def points_in_box(points, corners: np.ndarray) -> np.ndarray:
    """Boolean mask of points inside (or on) a convex CCW quadrilateral."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    inside = np.ones(len(pts), dtype=bool)
    for k in range(4):
        a, b = corners[k], corners[(k + 1) % 4]
        cross = (b[0] - a[0]) * (pts[:, 1] - a[1]) - (b[1] - a[1]) * (pts[:, 0] - a[0])
        inside &= cross >= -1e-12
    return inside
