from __future__ import annotations

import math

import numpy as np
import pytest
from helpers import brute_force_matches, brute_force_matches_permutation, gaussian_frechet, graph, line, scene
from hypothesis import given
from hypothesis import strategies as st

from lanesim.metrics import (FeatureFrechet, RECON_COLUMNS, frechet_1d, geo_metrics, match_points,
                             reconstruction_row, route_length_stats, sample_points, topo_metrics,
                             write_recon_report)
from lanesim.scene import LaneGraph, Pose
from lanesim.worldgen import GenConfig, generate_scene

EMPTY = LaneGraph(np.zeros((0, 20, 2)))


def naive_samples(lanes, spacing=1.5):
    out = []
    for pl in lanes:
        cum = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(pl, axis=0).T))])
        s = list(np.arange(0.0, cum[-1] + 1e-9, spacing))
        if cum[-1] - s[-1] > 1e-9:
            s.append(cum[-1])
        out += [(np.interp(v, cum, pl[:, 0]), np.interp(v, cum, pl[:, 1])) for v in s]
    return np.array(out).reshape(-1, 2)


def test_sample_point_counts():
    assert len(sample_points(graph([line((0, 0), (15, 0))]))) == 11
    assert len(sample_points(graph([line((0, 0), (1, 0))]))) == 2
    assert len(sample_points(EMPTY)) == 0


def test_identity_and_shift():
    g = graph([line((-20, 0), (20, 0))])
    m = geo_metrics(g, g)
    assert (m.f1, m.lateral, m.chamfer) == (1.0, 0.0, 0.0)
    m = geo_metrics(graph([line((-20, 0.5), (20, 0.5))]), g)
    assert m.f1 == 1.0 and m.lateral == pytest.approx(0.5) and m.chamfer == pytest.approx(0.5, abs=1e-9)
    assert geo_metrics(EMPTY, g).f1 == 0.0


def random_instance(seed: int):
    rng = np.random.default_rng(seed)
    def lanes(k):
        out = []
        for _ in range(k):
            p = rng.uniform(-10, 10, 2)
            h = rng.uniform(-math.pi, math.pi)
            L = rng.uniform(1.0, 15.0)
            out.append(line(p, p + L * np.array([math.cos(h), math.sin(h)])))
        return out
    gt = lanes(int(rng.integers(1, 3)))
    if seed % 2:
        pred = [pl + rng.normal(0, 0.8, 2) for pl in gt]  # shifted copies: dense near-threshold pairs
    else:
        pred = lanes(int(rng.integers(1, 3)))
    return graph(pred), graph(gt)


@pytest.mark.parametrize("seed", range(200))
def test_f1_matches_brute_force_assignment(seed):
    pred, gt = random_instance(seed)
    p, g = naive_samples(pred.lanes), naive_samples(gt.lanes)
    assert len(p) + len(g) <= 100 and len(p) <= 50 and len(g) <= 50
    np.testing.assert_allclose(sample_points(pred).positions, p, atol=1e-9)
    tp = brute_force_matches(p, g, 1.5)
    assert geo_metrics(pred, gt).f1 == pytest.approx(2 * tp / (len(p) + len(g)), abs=1e-12)


@pytest.mark.parametrize("seed", range(30))
def test_kuhn_oracle_agrees_with_permutations(seed):
    rng = np.random.default_rng(seed)
    p, g = rng.uniform(0, 3, (5, 2)), rng.uniform(0, 3, (6, 2))
    assert brute_force_matches(p, g, 1.0) == brute_force_matches_permutation(p, g, 1.0)
    assert len(match_points(p, g, 1.0)[0]) == brute_force_matches(p, g, 1.0)


def test_topo_detects_missing_edge():
    lanes = [line((-20, 0), (0, 0)), line((0, 0), (20, 0))]
    gt = graph(lanes, [[1], []])
    cut = graph(lanes)
    assert topo_metrics(cut, gt).f1 < geo_metrics(cut, gt).f1
    t = topo_metrics(gt, gt)
    assert (t.f1, t.lateral, t.chamfer) == (1.0, 0.0, 0.0)


def test_disconnected_prediction_inflates_topo_chamfer():
    lanes = [line((-30, 0), (-10, 0)), line((-10, 0), (10, 0)), line((10, 0), (30, 0))]
    gt = graph(lanes, [[1], [2], []])
    pred = graph(lanes)
    assert topo_metrics(pred, gt).chamfer > 5 * geo_metrics(pred, gt).chamfer


@given(st.floats(-10, 10), st.floats(-10, 10), st.floats(-math.pi, math.pi))
def test_metrics_invariant_under_rigid_transform(x, y, h):
    pred, gt = random_instance(7)
    pose = Pose(x, y, h)
    tp = graph([pose.to_local(pl) for pl in pred.lanes])
    tg = graph([pose.to_local(pl) for pl in gt.lanes])
    a, b = geo_metrics(pred, gt), geo_metrics(tp, tg)
    assert a.f1 == b.f1
    assert a.lateral == pytest.approx(b.lateral, abs=1e-9) and a.chamfer == pytest.approx(b.chamfer, abs=1e-9)


@pytest.mark.parametrize("seed", range(10))
def test_chamfer_symmetric(seed):
    pred, gt = random_instance(seed)
    assert geo_metrics(pred, gt).chamfer == pytest.approx(geo_metrics(gt, pred).chamfer, abs=1e-12)
    assert geo_metrics(pred, gt).f1 == pytest.approx(geo_metrics(gt, pred).f1, abs=1e-12)


def test_frechet_closed_forms():
    a = np.array([-1.0] * 5 + [0.0] * 10 + [1.0] * 5)
    a = a / a.std(ddof=1)
    assert frechet_1d(a, a) == 0.0
    assert frechet_1d(a, a + 3.0) == pytest.approx(9.0, abs=1e-9)
    assert frechet_1d(a, 2 * a) == pytest.approx(a.std(ddof=1) ** 2, abs=1e-9)
    with pytest.raises(ValueError):
        frechet_1d([1.0], [1.0, 2.0])


@given(st.lists(st.floats(-100, 100), min_size=2, max_size=30), st.lists(st.floats(-100, 100), min_size=2,
       max_size=30), st.floats(-50, 50))
def test_frechet_oracle_and_shift_invariance(a, b, c):
    assert frechet_1d(a, b) == pytest.approx(gaussian_frechet(a, b), rel=1e-9, abs=1e-9)
    assert frechet_1d(np.add(a, c), np.add(b, c)) == pytest.approx(frechet_1d(a, b), rel=1e-6, abs=1e-6)


def test_route_length_stats_examples():
    corridor = lambda L: scene([line((-L / 2, 0), (L / 2, 0))])  # noqa: E731
    assert route_length_stats([corridor(64.0)] * 3)[:2] == (pytest.approx(64.0), pytest.approx(0.0))
    mean, std, _ = route_length_stats([corridor(30.0), corridor(50.0)] * 2)
    assert (mean, std) == (pytest.approx(40.0), pytest.approx(10.0))
    mean, _, flagged = route_length_stats([EMPTY, EMPTY])
    assert mean == 0.0 and flagged == 2


def test_feature_frechet_estimator():
    scenes = [generate_scene(GenConfig(seed=s, layout="intersection")) for s in range(4)]
    scores = FeatureFrechet().fit(scenes).score_samples(scenes)
    assert set(scores) == {"connectivity", "density", "reach", "convenience"}
    assert all(v == 0.0 for v in scores.values())


def test_recon_report(tmp_path):
    g = graph([line((-20, 0), (20, 0))])
    rows = [reconstruction_row("a", g, g), reconstruction_row("b", EMPTY, g)]
    path = tmp_path / "r.csv"
    write_recon_report(path, rows)
    text = path.read_text().splitlines()
    assert text[0] == ",".join(RECON_COLUMNS)
    assert text[-1].startswith("mean,0.500000")
