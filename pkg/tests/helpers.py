"""Scene builders and independent reference implementations used by the tests.

The reference implementations deliberately avoid the package's own algorithms:
brute-force enumeration, explicit ODE integration and plain loops.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from lanesim.scene import AgentBox, AgentKind, LaneGraph, SceneState


def line(a, b, n: int = 20) -> np.ndarray:
    t = np.linspace(0.0, 1.0, n)[:, None]
    return (1.0 - t) * np.asarray(a, float) + t * np.asarray(b, float)


def arc(center, radius: float, a0: float, a1: float, n: int = 20) -> np.ndarray:
    th = np.linspace(a0, a1, n)
    return np.column_stack([center[0] + radius * np.cos(th), center[1] + radius * np.sin(th)])


def graph(lanes, successors=None) -> LaneGraph:
    lanes = np.asarray(lanes, float).reshape(-1, 20, 2)
    return LaneGraph.from_successors(lanes, successors or [[] for _ in lanes])


def scene(lanes, successors=None, agents=(), red=(), green=(), ego_velocity=(0.0, 0.0), fov=64.0) -> SceneState:
    return SceneState(graph(lanes, successors), np.asarray(red, float).reshape(-1, 20, 2),
                      np.asarray(green, float).reshape(-1, 20, 2), tuple(agents), ego_velocity, fov)


def vehicle(x, y, heading=0.0, speed=0.0, extent=(4.5, 2.0)) -> AgentBox:
    return AgentBox((x, y), heading, extent, AgentKind.VEHICLE, speed)


def straight_road(length: float = 100.0, y: float = 0.0, pieces: int = 1) -> list[np.ndarray]:
    """A chain of collinear lanes from x=-5 forward."""
    step = length / pieces
    return [line((-5.0 + k * step, y), (-5.0 + (k + 1) * step, y)) for k in range(pieces)]


# --- oracles ---------------------------------------------------------------


def brute_force_matches(pred: np.ndarray, gt: np.ndarray, threshold: float) -> int:
    """Maximum number of one-to-one pairs within ``threshold`` by exhaustive augmenting search.

    Plain Kuhn's algorithm over the threshold graph, written without any library.
    """
    ok = [[float(np.hypot(*(p - g))) <= threshold for g in gt] for p in pred]
    owner = [-1] * len(gt)

    def augment(i, seen):
        for j in range(len(gt)):
            if ok[i][j] and not seen[j]:
                seen[j] = True
                if owner[j] < 0 or augment(owner[j], seen):
                    owner[j] = i
                    return True
        return False

    return sum(augment(i, [False] * len(gt)) for i in range(len(pred)))


def brute_force_matches_permutation(pred: np.ndarray, gt: np.ndarray, threshold: float) -> int:
    """Exhaustive maximum matching by trying every injection (tiny inputs only)."""
    if len(pred) > len(gt):
        pred, gt = gt, pred
    best = 0
    for perm in itertools.permutations(range(len(gt)), len(pred)):
        best = max(best, sum(np.hypot(*(pred[i] - gt[j])) <= threshold for i, j in enumerate(perm)))
    return best


def brute_adjacency(lanes, max_distance=1.5, max_angle_deg=60.0) -> np.ndarray:
    n = len(lanes)
    adj = np.zeros((n, n), dtype=bool)
    for i in range(n):
        e = lanes[i][-1] - lanes[i][-2]
        for j in range(n):
            if i == j:
                continue
            s = lanes[j][1] - lanes[j][0]
            gap = math.dist(lanes[i][-1], lanes[j][0])
            cos = float(np.dot(e, s) / (np.linalg.norm(e) * np.linalg.norm(s)))
            angle = math.degrees(math.acos(max(-1.0, min(1.0, cos))))
            adj[i, j] = gap <= max_distance and angle < max_angle_deg
    return adj


def idm_rhs(v, v_lead, gap, p):
    """Unclamped textbook IDM right-hand side."""
    s_star = p.min_gap + v * p.headway + v * (v - v_lead) / (2.0 * math.sqrt(p.max_accel * p.comfort_decel))
    free = 1.0 - (v / p.desired_speed) ** p.exponent
    return p.max_accel * (free - (s_star / gap) ** 2 if math.isfinite(gap) else free)


def rk4_free_road(v0: float, p, t_end: float, h: float = 0.01) -> np.ndarray:
    """Speed trajectory on a free road by classical Runge-Kutta."""
    v, out = v0, [v0]
    for _ in range(int(round(t_end / h))):
        k1 = idm_rhs(v, 0, math.inf, p)
        k2 = idm_rhs(v + 0.5 * h * k1, 0, math.inf, p)
        k3 = idm_rhs(v + 0.5 * h * k2, 0, math.inf, p)
        k4 = idm_rhs(v + h * k3, 0, math.inf, p)
        v += h * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
        out.append(v)
    return np.array(out)


def gaussian_frechet(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    ma, mb = sum(a) / len(a), sum(b) / len(b)
    sa = math.sqrt(sum((x - ma) ** 2 for x in a) / (len(a) - 1))
    sb = math.sqrt(sum((x - mb) ** 2 for x in b) / (len(b) - 1))
    return (ma - mb) ** 2 + (sa - sb) ** 2


def zhang_suen_loops(mask: np.ndarray) -> np.ndarray:
    """Textbook Zhang-Suen thinning, pixel by pixel with explicit neighbour lists."""
    img = np.pad(np.asarray(mask, dtype=bool), 1).astype(int)
    h, w = img.shape
    changed = True
    while changed:
        changed = False
        for step in (0, 1):
            marked = []
            for r in range(1, h - 1):
                for c in range(1, w - 1):
                    if not img[r, c]:
                        continue
                    p = [img[r - 1, c], img[r - 1, c + 1], img[r, c + 1], img[r + 1, c + 1],
                         img[r + 1, c], img[r + 1, c - 1], img[r, c - 1], img[r - 1, c - 1]]
                    b = sum(p)
                    a = sum(1 for k in range(8) if p[k] == 0 and p[(k + 1) % 8] == 1)
                    p2, p4, p6, p8 = p[0], p[2], p[4], p[6]
                    if step == 0:
                        cond = p2 * p4 * p6 == 0 and p4 * p6 * p8 == 0
                    else:
                        cond = p2 * p4 * p8 == 0 and p2 * p6 * p8 == 0
                    if 2 <= b <= 6 and a == 1 and cond:
                        marked.append((r, c))
            for r, c in marked:
                img[r, c] = 0
            changed = changed or bool(marked)
    return img[1:-1, 1:-1].astype(bool)
