"""Open-vocabulary 3D scene graphs from point sets with per-view 2D masks."""
from __future__ import annotations

__version__ = "0.1.0"

from .errors import GSGraphError  # noqa: E402
from .model import (  # noqa: E402
    CameraView,
    ClusterSet,
    Detection,
    GraphEdge,
    GraphNode,
    RelationCandidate,
    SceneGraph,
    ScenePoints,
    Verdict,
    ViewBundle,
)

__all__ = [
    "__version__",
    "CameraView",
    "ClusterSet",
    "Detection",
    "GSGraphError",
    "GraphEdge",
    "GraphNode",
    "RelationCandidate",
    "SceneGraph",
    "ScenePoints",
    "Verdict",
    "ViewBundle",
]
