from __future__ import annotations

import json
import math

import numpy as np
import pytest
from helpers import line, scene, vehicle
from hypothesis import given
from hypothesis import strategies as st

from lanesim import geometry as geo
from lanesim.scene import (AgentBox, AgentKind, LaneGraph, Pose, SceneError, SceneState, clip_polyline,
                           load_scene, save_scene, transform_scene, validate_scene)


def minimal_doc(points=None):
    pts = [[float(x), 0.0] for x in range(-10, 10)] if points is None else points
    return {"fov_m": 64.0, "city": None, "lanes": [{"points": pts, "successors": []}], "red_lights": [],
            "green_lights": [], "agents": [], "ego_velocity": [0.0, 0.0]}


def test_minimal_document_loads():
    s = load_scene(json.dumps(minimal_doc()))
    assert len(s.graph) == 1 and not s.graph.adjacency.any()


def test_nineteen_point_lane_rejected():
    with pytest.raises(SceneError, match="polyline length ≠ 20"):
        load_scene(json.dumps(minimal_doc([[float(x), 0.0] for x in range(19)])))


@pytest.mark.parametrize("mutate, field", [
    (lambda d: d.pop("agents"), "agents"),
    (lambda d: d.update(extra=1), "extra"),
    (lambda d: d["lanes"][0].update(successors=[3]), "lanes[0].successors"),
    (lambda d: d["agents"].append({"kind": "car", "center": [0, 0], "heading": 0, "extent": [1, 1]}),
     "agents[0].kind"),
])
def test_schema_errors_name_the_field(mutate, field):
    doc = minimal_doc()
    mutate(doc)
    with pytest.raises(SceneError) as err:
        load_scene(json.dumps(doc))
    assert err.value.field == field


def test_invariant_violations():
    with pytest.raises(SceneError, match="outside"):
        validate_scene(scene([line((0, 0), (40, 0))]))
    with pytest.raises(SceneError, match="requires a speed"):
        validate_scene(scene([line((0, 0), (10, 0))], agents=[AgentBox((1, 1), 0, (4, 2), "vehicle")]))
    with pytest.raises(SceneError, match="no speed"):
        validate_scene(scene([line((0, 0), (10, 0))], agents=[AgentBox((1, 1), 0, (4, 2), "static", 0.0)]))
    with pytest.raises(SceneError, match="coincide"):
        validate_scene(scene([line((0, 0), (10, 0))], red=[line((0, 3), (5, 3))]))
    with pytest.raises(SceneError, match="starts"):
        validate_scene(scene([line((0, 0), (10, 0)), line((13, 0), (20, 0))], [[1], []]))


def sample_scene():
    agents = [vehicle(3.0, 0.0, 0.0, 4.0), AgentBox((5.0, 5.0), 1.0, (0.6, 0.6), AgentKind.PEDESTRIAN, 1.2),
              AgentBox((-6.0, -4.0), 0.5, (2.0, 1.0), AgentKind.STATIC)]
    return scene([line((-20, 0), (0, 0)), line((0, 0), (20, 0))], [[1], []], agents=agents,
                 red=[line((0, 0), (4, 0))], ego_velocity=(3.0, 0.0))


def test_save_is_deterministic_and_round_trips():
    s = sample_scene()
    blob = save_scene(s)
    assert blob == save_scene(s)
    back = load_scene(blob)
    assert back.same_as(s, atol=5e-7)  # six-decimal fixed format
    assert save_scene(back) == blob


def test_canonical_scene_round_trips_exactly():
    lanes = [np.column_stack([np.arange(20) * 0.5, np.full(20, 1.25)])]
    s = scene(lanes, agents=[vehicle(2.5, 1.25, 0.5, 3.0)], ego_velocity=(1.5, 0.0))
    assert load_scene(save_scene(s)).same_as(s)


def test_empty_lists_are_explicit():
    doc = json.loads(save_scene(scene([line((0, 0), (10, 0))])))
    assert doc["agents"] == [] and doc["red_lights"] == [] and doc["green_lights"] == []


def test_identity_transform():
    s = sample_scene()
    assert transform_scene(s, Pose()).same_as(s, atol=1e-12)


def test_shift_clips_centered_lane_to_half():
    s = scene([line((-32, 0), (32, 0))])
    out = transform_scene(s, Pose(32.0, 0.0, 0.0))
    assert len(out.graph) == 1
    assert geo.polyline_length(out.lanes[0]) == pytest.approx(32.0)
    assert out.lanes[0][-1][0] == pytest.approx(0.0)
    assert out.lanes[0][0][0] == pytest.approx(-32.0)


@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-math.pi, math.pi))
def test_inverse_transform_restores_scene(x, y, h):
    lanes = [line((-8, -2), (8, 3)), line((8, 3), (10, 12))]
    s = scene(lanes, [[1], []], agents=[vehicle(1, 1, 0.3, 2.0)], ego_velocity=(1.0, 0.5))
    p = Pose(x, y, h)
    back = transform_scene(transform_scene(s, p), p.inverse())
    assert back.same_as(s, atol=1e-9)


@given(st.floats(-20, 20), st.floats(-20, 20), st.floats(-math.pi, math.pi))
def test_rigid_transform_preserves_distances(x, y, h):
    pts = np.array([[1.0, 2.0], [-3.0, 4.0], [7.0, -1.0]])
    p = Pose(x, y, h)
    local = p.to_local(pts)
    d0 = np.linalg.norm(pts[:, None] - pts[None], axis=2)
    d1 = np.linalg.norm(local[:, None] - local[None], axis=2)
    np.testing.assert_allclose(d0, d1, atol=1e-9)


@given(st.floats(-40, 40), st.floats(-40, 40), st.floats(-math.pi, math.pi))
def test_clipping_never_leaves_short_pieces(x, y, h):
    pl = geo.resample_polyline(np.array([[-50.0, -10.0], [0.0, 15.0], [50.0, -5.0]]))
    for s0, s1, piece in clip_polyline(Pose(x, y, h).to_local(pl), geo.square_polygon(side=64.0)):
        assert geo.polyline_length(piece) >= 0.5 - 1e-9
        assert piece.shape == (20, 2)
        assert np.all(np.abs(piece) <= 32.0 + 1e-6)


def test_lanegraph_shape_checked():
    with pytest.raises(SceneError):
        LaneGraph(np.zeros((2, 19, 2)))
    with pytest.raises(SceneError):
        SceneState(LaneGraph(np.zeros((0, 20, 2))), red_lights=np.zeros((1, 5, 2)))
