"""Lane-graph reconstruction metrics (GEO / TOPO) and generation metrics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from lanesim import geometry as geo
from lanesim.lanegraph import FEATURE_NAMES, enumerate_routes, urban_features
from lanesim.scene import DEFAULT_FOV, LaneGraph
from lanesim.validation import check_graphs, check_samples

SAMPLE_SPACING = 1.5
MATCH_THRESHOLD = 1.5
TOPO_SEED_STRIDE = 10
# chamfer distance reported when exactly one of the point sets is empty
EMPTY_CHAMFER = DEFAULT_FOV


@dataclass(frozen=True)
class PointSamples:
    positions: np.ndarray  # (M, 2)
    lane: np.ndarray  # (M,) source lane index
    offset: np.ndarray  # (M,) arc position on the source lane

    def __len__(self) -> int:
        return len(self.positions)


@dataclass(frozen=True)
class MetricTriple:
    f1: float
    lateral: float
    chamfer: float
    has_true_positives: bool = True


def sample_points(graph: LaneGraph, spacing: float = SAMPLE_SPACING) -> PointSamples:
    """Points every ``spacing`` meters along each lane, always including both endpoints."""
    if not spacing > 0:
        raise ValueError("spacing must be positive")
    pos, lane_ids, offsets = [], [], []
    for i, pl in enumerate(graph.lanes):
        cum = geo.arc_lengths(pl)
        total = cum[-1]
        n = int(math.floor(total / spacing + 1e-9))
        s = spacing * np.arange(n + 1)
        if total - s[-1] > 1e-9:
            s = np.append(s, total)
        else:
            s[-1] = total
        pos.append(np.column_stack([np.interp(s, cum, pl[:, 0]), np.interp(s, cum, pl[:, 1])]))
        lane_ids.append(np.full(len(s), i))
        offsets.append(s)
    if not pos:
        return PointSamples(np.zeros((0, 2)), np.zeros(0, dtype=int), np.zeros(0))
    return PointSamples(np.vstack(pos), np.concatenate(lane_ids), np.concatenate(offsets))


def match_points(pred: np.ndarray, gt: np.ndarray, threshold: float = MATCH_THRESHOLD):
    """Optimal one-to-one assignment restricted to pairs within ``threshold``.

    Maximises the number of matched pairs, then minimises their total distance.
    The assignment is solved independently on every connected component of the
    feasibility graph. Returns ``(pred_idx, gt_idx)``.
    """
    if len(pred) == 0 or len(gt) == 0:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    rows, cols, vals = _feasible_pairs(pred, gt, threshold)
    return _assign(rows, cols, vals, len(pred), len(gt), threshold)


def _feasible_pairs(pred: np.ndarray, gt: np.ndarray, threshold: float):
    pairs = cKDTree(pred).sparse_distance_matrix(cKDTree(gt), threshold, output_type="ndarray")
    return pairs["i"].astype(int), pairs["j"].astype(int), pairs["v"]


def _assign(rows: np.ndarray, cols: np.ndarray, vals: np.ndarray, n: int, m: int, threshold: float):
    if len(rows) == 0:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    adj = csr_matrix((np.ones(len(rows)), (rows, cols + n)), shape=(n + m, n + m))
    _, labels = connected_components(adj, directed=False)
    comp = labels[rows]
    out_p, out_g = [], []
    order = np.argsort(comp, kind="stable")
    rows, cols, vals, comp = rows[order], cols[order], vals[order], comp[order]
    bounds = np.flatnonzero(np.diff(comp)) + 1
    for r, c, v in zip(np.split(rows, bounds), np.split(cols, bounds), np.split(vals, bounds)):
        ur, ri = np.unique(r, return_inverse=True)
        uc, ci = np.unique(c, return_inverse=True)
        if len(ur) == 1 or len(uc) == 1:
            k = int(np.argmin(v))
            if len(ur) == 1 and len(uc) == 1:
                out_p.append(ur[0]); out_g.append(uc[0])
            elif len(ur) == 1:
                out_p.append(ur[0]); out_g.append(c[k])
            else:
                out_p.append(r[k]); out_g.append(uc[0])
            continue
        big = threshold * (min(len(ur), len(uc)) + 1) * 10.0
        cost = np.full((len(ur), len(uc)), big)
        cost[ri, ci] = v
        a, b = linear_sum_assignment(cost)
        ok = cost[a, b] < big
        out_p.extend(ur[a[ok]])
        out_g.extend(uc[b[ok]])
    return np.asarray(out_p, dtype=int), np.asarray(out_g, dtype=int)


def base_metrics(pred: np.ndarray, gt: np.ndarray, gt_polylines: Sequence[np.ndarray],
                 threshold: float = MATCH_THRESHOLD, empty_chamfer: float = EMPTY_CHAMFER,
                 matches=None) -> MetricTriple:
    """F1, lateral offset and Chamfer distance between two point sets."""
    if len(pred) == 0 and len(gt) == 0:
        return MetricTriple(1.0, 0.0, 0.0, False)
    if len(pred) == 0 or len(gt) == 0:
        return MetricTriple(0.0, 0.0, float(empty_chamfer), False)
    pi, gi = match_points(pred, gt, threshold) if matches is None else matches
    tp = len(pi)
    f1 = 2.0 * tp / (len(pred) + len(gt))
    lateral = 0.0
    if tp:
        # the matched gt sample lies on a centerline, so its distance is also an upper bound;
        # taking the smaller of the two removes projection round-off on exact matches
        to_line = geo.distance_to_polylines(pred[pi], gt_polylines, max_distance=threshold)
        lateral = float(np.minimum(to_line, np.linalg.norm(pred[pi] - gt[gi], axis=1)).mean())
    d_pg, _ = cKDTree(gt).query(pred)
    d_gp, _ = cKDTree(pred).query(gt)
    chamfer = 0.5 * (float(d_pg.mean()) + float(d_gp.mean()))
    return MetricTriple(f1, lateral, chamfer, tp > 0)


def geo_metrics(pred: LaneGraph, gt: LaneGraph, spacing: float = SAMPLE_SPACING,
                threshold: float = MATCH_THRESHOLD) -> MetricTriple:
    """Metrics on point sets sampled from the complete graphs (adjacency ignored)."""
    p = sample_points(pred, spacing)
    g = sample_points(gt, spacing)
    return base_metrics(p.positions, g.positions, list(gt.lanes), threshold)


def _reachable_lanes(graph: LaneGraph) -> list[set[int]]:
    succ = [graph.successors(i) for i in range(len(graph))]
    out = []
    for start in range(len(graph)):
        seen: set[int] = set()
        stack = list(succ[start])
        while stack:
            j = stack.pop()
            if j not in seen:
                seen.add(j)
                stack.extend(succ[j])
        out.append(seen)
    return out


def _reachable_points(samples: PointSamples, reach: list[set[int]], idx: int) -> np.ndarray:
    lane = samples.lane[idx]
    lanes = reach[lane]
    if lane in lanes:  # the lane lies on a cycle, so all of it is reachable
        mask = np.isin(samples.lane, list(lanes))
    else:
        mask = np.isin(samples.lane, list(lanes)) | (
            (samples.lane == lane) & (samples.offset >= samples.offset[idx] - 1e-12))
    return np.flatnonzero(mask)


def topo_metrics(pred: LaneGraph, gt: LaneGraph, spacing: float = SAMPLE_SPACING,
                 threshold: float = MATCH_THRESHOLD, stride: int = TOPO_SEED_STRIDE) -> MetricTriple:
    """Metrics averaged over forward-reachable sub-graphs seeded at every 10th gt point."""
    p = sample_points(pred, spacing)
    g = sample_points(gt, spacing)
    if len(g) == 0:
        return base_metrics(p.positions, g.positions, [], threshold)
    pi, gi = match_points(p.positions, g.positions, threshold)
    matched = dict(zip(gi.tolist(), pi.tolist()))
    if len(p.positions):
        rows, cols, vals = _feasible_pairs(p.positions, g.positions, threshold)
    reach_g = _reachable_lanes(gt)
    reach_p = _reachable_lanes(pred)
    results = []
    for seed in range(0, len(g), stride):
        g_idx = _reachable_points(g, reach_g, seed)
        lanes = sorted({int(g.lane[seed])} | reach_g[g.lane[seed]])
        gt_lines = [gt.lanes[k] for k in lanes]
        if seed in matched:
            p_idx = _reachable_points(p, reach_p, matched[seed])
            # restrict the precomputed pairs to the sub-graphs, renumbered locally
            p_local = np.full(len(p.positions), -1)
            p_local[p_idx] = np.arange(len(p_idx))
            g_local = np.full(len(g.positions), -1)
            g_local[g_idx] = np.arange(len(g_idx))
            keep = (p_local[rows] >= 0) & (g_local[cols] >= 0)
            sub = _assign(p_local[rows[keep]], g_local[cols[keep]], vals[keep], len(p_idx), len(g_idx), threshold)
            results.append(base_metrics(p.positions[p_idx], g.positions[g_idx], gt_lines, threshold, matches=sub))
        else:
            results.append(base_metrics(np.zeros((0, 2)), g.positions[g_idx], gt_lines, threshold))
    with_tp = [r.lateral for r in results if r.has_true_positives]
    return MetricTriple(
        float(np.mean([r.f1 for r in results])),
        float(np.mean(with_tp)) if with_tp else 0.0,
        float(np.mean([r.chamfer for r in results])),
        bool(with_tp),
    )


# --- generation metrics ----------------------------------------------------


def frechet_1d(samples_a, samples_b) -> float:
    """Frechet distance between Gaussians fitted to two scalar samples.

    ``(mean_a - mean_b)**2 + (std_a - std_b)**2`` with the sample (ddof=1) standard deviation.
    """
    a = check_samples(samples_a, "samples_a")
    b = check_samples(samples_b, "samples_b")
    return float((a.mean() - b.mean()) ** 2 + (a.std(ddof=1) - b.std(ddof=1)) ** 2)


def longest_route_length(graph: LaneGraph, origin=(0.0, 0.0)) -> float:
    from lanesim.lanegraph import nearest_lane

    if len(graph) == 0:
        return 0.0
    start = nearest_lane(graph, origin)
    return max(r.length(graph) for r in enumerate_routes(graph, start))


def route_length_stats(scenes: Iterable) -> tuple[float, float, int]:
    """Mean and population std of the longest route per scene.

    Scenes without lanes contribute 0; their count is returned as the third element.
    """
    graphs = check_graphs(scenes)
    if not graphs:
        raise ValueError("route_length_stats needs at least one scene")
    lengths = np.array([longest_route_length(g) for g in graphs])
    flagged = sum(1 for g in graphs if len(g) == 0)
    return float(lengths.mean()), float(lengths.std()), flagged


class FeatureFrechet(BaseEstimator):
    """Frechet distances between urban-planning features of generated and reference graphs.

    ``fit`` stores per-graph features of the reference set; ``score_samples``
    returns one distance per feature for a generated set.
    """

    def __init__(self, tolerance=1.5):
        self.tolerance = tolerance

    def _features(self, X) -> np.ndarray:
        graphs = check_graphs(X)
        return np.array([urban_features(g, self.tolerance).as_array() for g in graphs]).reshape(-1, 4)

    def fit(self, X, y=None):
        feats = self._features(X)
        if len(feats) < 2:
            raise ValueError("need at least 2 reference graphs")
        self.reference_features_ = feats
        return self

    def score_samples(self, X) -> dict[str, float]:
        check_is_fitted(self, "reference_features_")
        feats = self._features(X)
        return {name: frechet_1d(feats[:, k], self.reference_features_[:, k])
                for k, name in enumerate(FEATURE_NAMES)}


# --- reports ---------------------------------------------------------------

RECON_COLUMNS = ("scene_id", "geo_f1", "geo_lat", "geo_chamfer", "topo_f1", "topo_lat", "topo_chamfer")


def reconstruction_row(scene_id: str, pred: LaneGraph, gt: LaneGraph) -> dict:
    g = geo_metrics(pred, gt)
    t = topo_metrics(pred, gt)
    return {"scene_id": scene_id, "geo_f1": g.f1, "geo_lat": g.lateral, "geo_chamfer": g.chamfer,
            "topo_f1": t.f1, "topo_lat": t.lateral, "topo_chamfer": t.chamfer}


def aggregate_rows(rows: Sequence[dict]) -> dict:
    """Scene-averaged aggregate row, labelled ``mean``."""
    agg = {"scene_id": "mean"}
    for col in RECON_COLUMNS[1:]:
        agg[col] = float(np.mean([r[col] for r in rows])) if rows else 0.0
    return agg


def write_recon_report(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RECON_COLUMNS)
        writer.writeheader()
        for row in list(rows) + [aggregate_rows(rows)]:
            writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
