"""Input checks used by the estimator wrappers and the CLI."""

from __future__ import annotations

from collections.abc import Iterable

import numpy as np

from lanesim.scene import LaneGraph, SceneState


def check_scenes(X) -> list[SceneState]:
    """Accept a single scene or an iterable of scenes."""
    if isinstance(X, SceneState):
        return [X]
    if not isinstance(X, Iterable):
        raise TypeError(f"expected SceneState objects, got {type(X).__name__}")
    scenes = list(X)
    for n, s in enumerate(scenes):
        if not isinstance(s, SceneState):
            raise TypeError(f"element {n} is {type(s).__name__}, expected SceneState")
    return scenes


def check_graphs(X) -> list[LaneGraph]:
    """Accept lane graphs or scenes (their graphs are used)."""
    if isinstance(X, (LaneGraph, SceneState)):
        X = [X]
    if not isinstance(X, Iterable):
        raise TypeError(f"expected LaneGraph objects, got {type(X).__name__}")
    out = []
    for n, g in enumerate(X):
        if isinstance(g, SceneState):
            g = g.graph
        if not isinstance(g, LaneGraph):
            raise TypeError(f"element {n} is {type(g).__name__}, expected LaneGraph")
        out.append(g)
    return out


def check_samples(values, name: str, min_count: int = 2) -> np.ndarray:
    arr = np.asarray(values, dtype=float).ravel()
    if arr.size < min_count:
        raise ValueError(f"{name} needs at least {min_count} samples, got {arr.size}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr
