"""Vectorized driving scenes, lane-graph tools, procedural generation and closed-loop simulation."""

from __future__ import annotations

from lanesim.scene import AgentBox, AgentKind, LaneGraph, Pose, SceneError, SceneState, load_scene, save_scene

__version__ = "0.1.0"

__all__ = ["AgentBox", "AgentKind", "LaneGraph", "Pose", "SceneError", "SceneState", "load_scene", "save_scene",
           "__version__"]
