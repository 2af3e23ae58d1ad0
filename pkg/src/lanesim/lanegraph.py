"""Graph algorithms on lane polylines: adjacency recovery, key points, routes and
urban-planning features."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from lanesim import geometry as geo
from lanesim.scene import CONNECT_ANGLE_DEG, CONNECT_DISTANCE, LaneGraph

TURN_THRESHOLD_DEG = 45.0
MAX_ROUTES = 256
MAX_FEATURE_PATHS = 10_000


@dataclass(frozen=True)
class Route:
    lane_indices: tuple[int, ...]
    entry_offset: float = 0.0
    exit_offset: float | None = None  # arc position on the last lane; None = lane end

    def length(self, graph: LaneGraph) -> float:
        lengths = graph.lengths[list(self.lane_indices)]
        exit_ = lengths[-1] if self.exit_offset is None else self.exit_offset
        return float(lengths[:-1].sum() + exit_ - self.entry_offset)

    def polyline(self, graph: LaneGraph) -> np.ndarray:
        """Concatenated centerline from the entry to the exit offset."""
        parts = []
        last = len(self.lane_indices) - 1
        for n, i in enumerate(self.lane_indices):
            pts = graph.lanes[i]
            total = graph.lengths[i]
            s0 = self.entry_offset if n == 0 else 0.0
            s1 = total if (n < last or self.exit_offset is None) else self.exit_offset
            if s0 > 0.0 or s1 < total:
                pts = geo.sub_polyline(pts, s0, s1)
            parts.append(pts if not parts else pts[1:])
        return np.vstack(parts)


@dataclass(frozen=True)
class UrbanFeatures:
    connectivity: float
    density: int
    reach: int
    convenience: float

    def as_array(self) -> np.ndarray:
        return np.array([self.connectivity, self.density, self.reach, self.convenience], dtype=float)


FEATURE_NAMES = ("connectivity", "density", "reach", "convenience")


def recover_adjacency(lanes, max_distance: float = CONNECT_DISTANCE,
                      max_angle_deg: float = CONNECT_ANGLE_DEG) -> np.ndarray:
    """Connect lane ``i`` to lane ``j`` when ``i`` ends where ``j`` starts.

    An edge needs an end-to-start gap of at most ``max_distance`` meters and a
    heading difference strictly below ``max_angle_deg`` between the last segment
    of ``i`` and the first segment of ``j``.
    """
    lanes = np.asarray(lanes, dtype=float)
    n = len(lanes)
    if n == 0:
        return np.zeros((0, 0), dtype=bool)
    ends = lanes[:, -1]
    starts = lanes[:, 0]
    gap = np.linalg.norm(ends[:, None, :] - starts[None, :, :], axis=2)
    end_h = np.array([geo.end_heading(pl) for pl in lanes])
    start_h = np.array([geo.start_heading(pl) for pl in lanes])
    dh = np.abs(geo.wrap_angle(end_h[:, None] - start_h[None, :]))
    adj = (gap <= max_distance) & (np.degrees(dh) < max_angle_deg)
    np.fill_diagonal(adj, False)
    return adj


def with_recovered_adjacency(lanes) -> LaneGraph:
    lanes = np.asarray(lanes, dtype=float)
    return LaneGraph(lanes, recover_adjacency(lanes))


# --- nodes and key points --------------------------------------------------


@dataclass(frozen=True)
class NodeGraph:
    """Lane endpoints merged into nodes; every lane is a directed edge between two nodes."""

    positions: np.ndarray  # (M, 2)
    start_node: np.ndarray  # (N,) node index of each lane start
    end_node: np.ndarray  # (N,) node index of each lane end
    lengths: np.ndarray  # (N,)

    @property
    def in_degree(self) -> np.ndarray:
        return np.bincount(self.end_node, minlength=len(self.positions))

    @property
    def out_degree(self) -> np.ndarray:
        return np.bincount(self.start_node, minlength=len(self.positions))

    @property
    def degree(self) -> np.ndarray:
        return self.in_degree + self.out_degree


def build_nodes(graph: LaneGraph, tolerance: float = CONNECT_DISTANCE) -> NodeGraph:
    n = len(graph)
    if n == 0:
        empty = np.zeros(0, dtype=int)
        return NodeGraph(np.zeros((0, 2)), empty, empty, np.zeros(0))
    pts = np.concatenate([graph.lanes[:, 0], graph.lanes[:, -1]])
    parent = list(range(len(pts)))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    dist = np.linalg.norm(pts[:, None] - pts[None], axis=2)
    for a, b in zip(*np.nonzero(np.triu(dist <= tolerance, k=1))):
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    roots = [find(a) for a in range(len(pts))]
    order = {r: k for k, r in enumerate(sorted(set(roots)))}
    label = np.array([order[r] for r in roots])
    positions = np.array([pts[label == k].mean(axis=0) for k in range(len(order))])
    return NodeGraph(positions, label[:n], label[n:], graph.lengths.copy())


def key_points(graph: LaneGraph, tolerance: float = CONNECT_DISTANCE):
    """Graph nodes whose total degree (in + out) differs from 2.

    Returns ``(positions, degrees)``.
    """
    nodes = build_nodes(graph, tolerance)
    deg = nodes.degree
    mask = deg != 2
    return nodes.positions[mask], deg[mask]


# --- routes ----------------------------------------------------------------


def enumerate_routes(graph: LaneGraph, start_lane: int, max_routes: int = MAX_ROUTES) -> list[Route]:
    """All maximal simple lane sequences from ``start_lane`` in depth-first order."""
    if not 0 <= start_lane < len(graph):
        raise IndexError(f"start lane {start_lane} does not exist")
    succ = [graph.successors(i) for i in range(len(graph))]
    routes: list[Route] = []
    path = [start_lane]
    on_path = {start_lane}
    stack = [iter(succ[start_lane])]
    extended = [False]
    while stack and len(routes) < max_routes:
        j = next(stack[-1], None)
        if j is None:
            if not extended[-1]:
                routes.append(Route(tuple(path)))
            stack.pop()
            extended.pop()
            on_path.discard(path.pop())
            continue
        if j in on_path:
            continue
        extended[-1] = True
        path.append(j)
        on_path.add(j)
        stack.append(iter(succ[j]))
        extended.append(False)
    return routes


def lane_turns(graph: LaneGraph, threshold_deg: float = TURN_THRESHOLD_DEG) -> np.ndarray:
    """Per-lane flag: cumulative heading change exceeds the turn threshold."""
    if len(graph) == 0:
        return np.zeros(0, dtype=bool)
    change = np.array([abs(geo.heading_change(pl)) for pl in graph.lanes])
    return np.degrees(change) > threshold_deg


def count_turns(route: Route, graph: LaneGraph, threshold_deg: float = TURN_THRESHOLD_DEG) -> int:
    turns = lane_turns(graph, threshold_deg)
    return int(sum(turns[i] for i in route.lane_indices))


def rank_routes(graph: LaneGraph, routes: Sequence[Route], difficulty: str = "easy") -> list[Route]:
    """Order routes by preference: most (hard) or fewest (easy) turns, then longest,
    then lexicographically lowest lane sequence."""
    if difficulty not in ("easy", "hard"):
        raise ValueError(f"difficulty must be 'easy' or 'hard', got {difficulty!r}")
    turns = lane_turns(graph)
    sign = -1 if difficulty == "hard" else 1

    def key(r: Route):
        return (sign * int(turns[list(r.lane_indices)].sum()), -round(r.length(graph), 9), r.lane_indices)

    return sorted(routes, key=key)


def select_route(graph: LaneGraph, start: int, difficulty: str = "easy",
                 routes: Sequence[Route] | None = None,
                 accept: Callable[[Route], bool] | None = None) -> Route:
    """Pick the route with the most (hard) or fewest (easy) turns.

    Ties go to the longer route, then to the lexicographically lower lane sequence.
    """
    if difficulty not in ("easy", "hard"):
        raise ValueError(f"difficulty must be 'easy' or 'hard', got {difficulty!r}")
    if routes is None:
        routes = enumerate_routes(graph, start)
    if accept is not None:
        routes = [r for r in routes if accept(r)]
    if not routes:
        raise LookupError(f"no route from lane {start}")
    return rank_routes(graph, routes, difficulty)[0]


def nearest_lane(graph: LaneGraph, point=(0.0, 0.0), heading: float | None = None) -> int:
    """Index of the lane closest to ``point``; heading mismatch is penalised when given."""
    if len(graph) == 0:
        raise LookupError("graph has no lanes")
    best, best_cost = -1, math.inf
    for i, pl in enumerate(graph.lanes):
        d, s, k = geo.project_to_polyline(point, pl)
        cost = d
        if heading is not None:
            seg = pl[k + 1] - pl[k]
            cost += 2.0 * abs(geo.wrap_angle(math.atan2(seg[1], seg[0]) - heading))
        if cost < best_cost - 1e-12:
            best, best_cost = i, cost
    return best


# --- urban-planning features -----------------------------------------------


def urban_features(graph: LaneGraph, tolerance: float = CONNECT_DISTANCE,
                   max_paths: int = MAX_FEATURE_PATHS) -> UrbanFeatures:
    """Connectivity, density, reach and convenience of a lane graph.

    Key points are nodes of degree != 2. A valid path runs from a key point with no
    incoming lanes to a distinct key point with no outgoing lanes. Reach counts the
    connected (source, sink) pairs, convenience is their mean shortest path length.
    Simple paths are enumerated depth-first up to ``max_paths``.
    """
    nodes = build_nodes(graph, tolerance)
    deg = nodes.degree
    key = deg != 2
    density = int(key.sum())
    if density == 0:
        return UrbanFeatures(0.0, 0, 0, 0.0)
    connectivity = float(deg[key].mean())
    out_edges: dict[int, list[tuple[int, float]]] = {}
    for lane in range(len(nodes.start_node)):
        out_edges.setdefault(int(nodes.start_node[lane]), []).append(
            (int(nodes.end_node[lane]), float(nodes.lengths[lane])))
    sources = [int(v) for v in np.flatnonzero(key & (nodes.in_degree == 0))]
    sinks = set(int(v) for v in np.flatnonzero(key & (nodes.out_degree == 0)))
    best: dict[tuple[int, int], float] = {}
    budget = [max_paths, 50 * max_paths]
    for src in sources:
        _paths_from(src, out_edges, sinks, best, budget)
    reach = len(best)
    convenience = float(np.mean(list(best.values()))) if reach else 0.0
    return UrbanFeatures(connectivity, density, reach, convenience)


def _paths_from(src, out_edges, sinks, best, budget):
    stack = [(src, 0.0, frozenset([src]), iter(out_edges.get(src, ())))]
    while stack and budget[0] > 0 and budget[1] > 0:
        node, dist, seen, it = stack[-1]
        step = next(it, None)
        if step is None:
            stack.pop()
            continue
        nxt, length = step
        if nxt in seen:
            continue
        total = dist + length
        budget[1] -= 1
        if nxt in sinks and nxt != src:
            budget[0] -= 1
            pair = (src, nxt)
            if total < best.get(pair, math.inf):
                best[pair] = total
        stack.append((nxt, total, seen | {nxt}, iter(out_edges.get(nxt, ()))))


class UrbanFeatureExtractor(TransformerMixin, BaseEstimator):
    """Map lane graphs to rows of (connectivity, density, reach, convenience)."""

    def __init__(self, tolerance=CONNECT_DISTANCE, max_paths=MAX_FEATURE_PATHS):
        self.tolerance = tolerance
        self.max_paths = max_paths

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        from lanesim.validation import check_graphs

        graphs = check_graphs(X)
        if not graphs:
            return np.zeros((0, len(FEATURE_NAMES)))
        return np.vstack([urban_features(g, self.tolerance, self.max_paths).as_array() for g in graphs])

    def get_feature_names_out(self, input_features=None):
        return np.array(FEATURE_NAMES, dtype=object)
