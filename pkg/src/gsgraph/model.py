"""Shared domain types and their invariant checks."""
from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass, field
from typing import Any

import numpy as np

DEFAULT_INSTANCE_DIM = 6
DEFAULT_SEMANTIC_DIM = 512
UNASSIGNED = -1


def _frozen(a, dtype) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


def _values_equal(a: Any, b: Any) -> bool:
    if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
        return (
            isinstance(a, np.ndarray)
            and isinstance(b, np.ndarray)
            and a.shape == b.shape
            and bool(np.array_equal(a, b))
        )
    if dataclasses.is_dataclass(a) and not isinstance(a, type):
        return type(a) is type(b) and all(
            _values_equal(getattr(a, f.name), getattr(b, f.name)) for f in dataclasses.fields(a)
        )
    if isinstance(a, dict):
        return (
            isinstance(b, dict)
            and a.keys() == b.keys()
            and all(_values_equal(a[k], b[k]) for k in a)
        )
    if isinstance(a, (list, tuple)):
        return (
            isinstance(b, (list, tuple))
            and len(a) == len(b)
            and all(_values_equal(x, y) for x, y in zip(a, b))
        )
    return a == b


class _StructEq:
    def __eq__(self, other):
        return _values_equal(self, other)

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True, eq=False)
class ScenePoints(_StructEq):
    """Point set with per-point instance features and optional cluster labels.

    ``labels`` uses -1 for "not yet assigned".
    """

    positions: np.ndarray
    instance_features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "positions", _frozen(self.positions, np.float64))
        feats = np.asarray(self.instance_features, dtype=np.float64)
        if feats.ndim == 1:
            feats = feats.reshape(-1, 1) if feats.size else feats.reshape(0, DEFAULT_INSTANCE_DIM)
        object.__setattr__(self, "instance_features", _frozen(feats, np.float64))
        object.__setattr__(self, "labels", _frozen(self.labels, np.int64))

    @classmethod
    def from_positions(cls, positions, instance_dim: int = DEFAULT_INSTANCE_DIM, features=None):
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        m = positions.shape[0]
        if features is None:
            features = np.zeros((m, instance_dim))
        return cls(positions, features, np.full(m, UNASSIGNED, dtype=np.int64))

    @property
    def count(self) -> int:
        return int(self.positions.shape[0])

    @property
    def instance_dim(self) -> int:
        return int(self.instance_features.shape[1]) if self.instance_features.ndim == 2 else 0

    def with_features(self, features) -> "ScenePoints":
        return ScenePoints(self.positions, features, self.labels)

    def with_labels(self, labels) -> "ScenePoints":
        return ScenePoints(self.positions, self.instance_features, labels)


def validate_scene(points: ScenePoints, k_total: int | None = None) -> list[str]:
    """Return every invariant violation of ``points``; empty when well formed.

    ``k_total`` is the cluster count labels are checked against; when omitted
    it is taken as ``max(label) + 1`` so only negative labels other than -1
    are reported.
    """
    out: list[str] = []
    pos, feats, labels = points.positions, points.instance_features, points.labels
    if pos.ndim != 2 or pos.shape[1] != 3:
        out.append(f"positions: expected shape (M, 3), got {pos.shape}")
    if feats.ndim != 2:
        out.append(f"instance_features: expected 2-D array, got {feats.ndim}-D")
    if labels.ndim != 1:
        out.append(f"labels: expected 1-D array, got {labels.ndim}-D")
    n_pos, n_feat, n_lab = len(pos), len(feats), len(labels)
    if not n_pos == n_feat == n_lab:
        out.append(
            f"length mismatch: positions={n_pos} instance_features={n_feat} labels={n_lab}"
        )
    if pos.size and not np.isfinite(pos).all():
        bad = np.nonzero(~np.isfinite(pos).reshape(len(pos), -1).all(axis=1))[0]
        out.extend(f"positions[{i}]: non-finite" for i in bad)
    if feats.size and not np.isfinite(feats).all():
        bad = np.nonzero(~np.isfinite(feats).reshape(len(feats), -1).all(axis=1))[0]
        out.extend(f"instance_features[{i}]: non-finite" for i in bad)
    if labels.size:
        assigned = labels[labels != UNASSIGNED]
        upper = k_total if k_total is not None else (int(assigned.max()) + 1 if assigned.size else 0)
        bad = np.nonzero((labels != UNASSIGNED) & ((labels < 0) | (labels >= upper)))[0]
        out.extend(f"labels[{i}]: {labels[i]} outside [0, {upper})" for i in bad)
    return out


@dataclass(frozen=True, eq=False)
class CameraView(_StructEq):
    """Pinhole camera. ``rotation``/``translation`` map world to camera frame
    (x right, y down, z forward)."""

    rotation: np.ndarray
    translation: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        object.__setattr__(self, "rotation", _frozen(self.rotation, np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", _frozen(self.translation, np.float64).reshape(3))

    def violations(self) -> list[str]:
        out = []
        if not (self.fx > 0 and self.fy > 0):
            out.append("camera: fx and fy must be > 0")
        if not (self.width > 0 and self.height > 0):
            out.append("camera: width and height must be > 0")
        r = self.rotation
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6) or abs(np.linalg.det(r) - 1) > 1e-6:
            out.append("camera: rotation is not orthonormal")
        return out

    def to_camera(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def project(self, points) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return (u, v, depth); u, v are NaN for points with depth <= 0."""
        pc = self.to_camera(points).reshape(-1, 3)
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = np.where(z > 0, self.fx * pc[:, 0] / z + self.cx, np.nan)
            v = np.where(z > 0, self.fy * pc[:, 1] / z + self.cy, np.nan)
        return u, v, z


@dataclass(frozen=True)
class Detection:
    category: str
    box: tuple[float, float, float, float]  # x0, y0, x1, y1 in pixels
    mask_index: int


@dataclass(frozen=True)
class RelationCandidate:
    subject: int
    predicate: str
    object: int
    subject_category: str
    object_category: str


@dataclass(frozen=True, eq=False)
class ViewBundle(_StructEq):
    """Everything extracted from one posed view.

    ``confidence_map`` is an optional per-pixel confidence grid; when absent
    the per-mask confidences are broadcast to their pixels.
    """

    view_id: str
    camera: CameraView
    full_segmentation: np.ndarray
    mask_features: dict[int, np.ndarray]
    mask_confidences: dict[int, float]
    detections: tuple[Detection, ...] = ()
    captions: dict[int, str] = field(default_factory=dict)
    relation_candidates: tuple[RelationCandidate, ...] = ()
    confidence_map: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "full_segmentation", _frozen(self.full_segmentation, np.int64))
        object.__setattr__(
            self,
            "mask_features",
            {int(k): _frozen(v, np.float64) for k, v in sorted(self.mask_features.items())},
        )
        object.__setattr__(
            self, "mask_confidences", {int(k): float(v) for k, v in sorted(self.mask_confidences.items())}
        )
        object.__setattr__(self, "captions", {int(k): str(v) for k, v in sorted(self.captions.items())})
        object.__setattr__(self, "detections", tuple(self.detections))
        object.__setattr__(self, "relation_candidates", tuple(self.relation_candidates))
        if self.confidence_map is not None:
            object.__setattr__(self, "confidence_map", _frozen(self.confidence_map, np.float64))

    @property
    def mask_ids(self) -> list[int]:
        ids = np.unique(self.full_segmentation)
        return [int(i) for i in ids if i >= 0]

    def semantic_dim(self) -> int:
        for v in self.mask_features.values():
            return int(v.shape[0])
        return 0

    def pixel_confidence(self) -> np.ndarray:
        if self.confidence_map is not None:
            return self.confidence_map
        seg = self.full_segmentation
        conf = np.zeros(seg.shape)
        for i, c in self.mask_confidences.items():
            conf[seg == i] = c
        return conf


def validate_bundle(bundle: ViewBundle) -> list[str]:
    out = [f"{bundle.view_id}: {v}" for v in bundle.camera.violations()]
    seg = bundle.full_segmentation
    cam = bundle.camera
    if seg.shape != (cam.height, cam.width):
        out.append(f"{bundle.view_id}: segmentation shape {seg.shape} != ({cam.height}, {cam.width})")
    if seg.size and seg.min() < -1:
        out.append(f"{bundle.view_id}: segmentation holds values below -1")
    present = set(bundle.mask_ids)

    def need(idx: int, where: str):
        if idx not in present:
            out.append(f"{bundle.view_id}: {where} references mask {idx} absent from segmentation")

    for k, det in enumerate(bundle.detections):
        need(det.mask_index, f"detections[{k}]")
    for idx in bundle.captions:
        need(idx, f"captions[{idx}]")
    for k, rel in enumerate(bundle.relation_candidates):
        need(rel.subject, f"relation_candidates[{k}].subject")
        need(rel.object, f"relation_candidates[{k}].object")
    dim = None
    for idx, vec in bundle.mask_features.items():
        if vec.ndim != 1:
            out.append(f"{bundle.view_id}: mask_features[{idx}] is not a vector")
            continue
        if dim is None:
            dim = vec.shape[0]
        elif vec.shape[0] != dim:
            out.append(f"{bundle.view_id}: mask_features[{idx}] has dim {vec.shape[0]} != {dim}")
        norm = float(np.linalg.norm(vec))
        if not np.isfinite(norm) or abs(norm - 1.0) > 1e-5:
            out.append(f"{bundle.view_id}: mask_features[{idx}] norm {norm:.6g} is not 1")
    for idx, c in bundle.mask_confidences.items():
        if not 0.0 <= c <= 1.0:
            out.append(f"{bundle.view_id}: mask_confidences[{idx}]={c} outside [0, 1]")
    if bundle.confidence_map is not None:
        cm = bundle.confidence_map
        if cm.shape != seg.shape:
            out.append(f"{bundle.view_id}: confidence_map shape {cm.shape} != {seg.shape}")
        elif cm.size and (cm.min() < 0 or cm.max() > 1):
            out.append(f"{bundle.view_id}: confidence_map values outside [0, 1]")
    return out


@dataclass(frozen=True, eq=False)
class ClusterSet(_StructEq):
    """Cluster centers in G^f space, their member counts and per-point labels."""

    centers: np.ndarray
    member_counts: np.ndarray
    assignments: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=np.float64)
        if c.ndim == 1:
            c = c.reshape(0, 0) if c.size == 0 else c.reshape(1, -1)
        object.__setattr__(self, "centers", _frozen(c, np.float64))
        object.__setattr__(self, "member_counts", _frozen(self.member_counts, np.int64))
        object.__setattr__(self, "assignments", _frozen(self.assignments, np.int64))

    @property
    def k(self) -> int:
        return int(self.centers.shape[0])

    @classmethod
    def from_assignments(cls, features: np.ndarray, assignments: np.ndarray) -> "ClusterSet":
        """Compact labels to 0..k-1 (order of first appearance) and recompute means."""
        assignments = np.asarray(assignments, dtype=np.int64)
        features = np.asarray(features, dtype=np.float64)
        if assignments.size == 0:
            return cls(np.zeros((0, features.shape[1] if features.ndim == 2 else 0)), [], assignments)
        _, first, inv = np.unique(assignments, return_index=True, return_inverse=True)
        rank = np.empty(first.size, dtype=np.int64)
        rank[np.argsort(first, kind="stable")] = np.arange(first.size)
        labels = rank[inv.reshape(-1)]
        k = first.size
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros((k, features.shape[1]))
        np.add.at(sums, labels, features)
        return cls(sums / counts[:, None], counts, labels)

    def violations(self, features: np.ndarray | None = None) -> list[str]:
        out = []
        if len(self.member_counts) != self.k:
            out.append("member_counts length != k")
        assigned = self.assignments[self.assignments >= 0]
        if int(self.member_counts.sum()) != assigned.size:
            out.append("member_counts does not sum to the number of assigned points")
        if assigned.size and assigned.max() >= self.k:
            out.append("assignment index out of range")
        if features is not None and self.k:
            for c in range(self.k):
                members = features[self.assignments == c]
                if len(members) and not np.allclose(members.mean(axis=0), self.centers[c], atol=1e-5):
                    out.append(f"center {c} differs from its members' mean")
        return out


class Verdict(str, enum.Enum):
    KEPT = "kept"
    DROPPED_CONTACT = "dropped_contact"
    DROPPED_DIRECTION = "dropped_direction"
    DROPPED_ADJACENCY = "dropped_adjacency"


@dataclass(frozen=True, eq=False)
class GraphNode(_StructEq):
    cluster_id: int
    semantic_feature: np.ndarray
    category: str
    attributes: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "semantic_feature", _frozen(self.semantic_feature, np.float64))
        object.__setattr__(self, "attributes", tuple(self.attributes))


@dataclass(frozen=True)
class GraphEdge:
    subject: int
    predicate: str
    object: int
    support_views: int = 1
    verified: bool = False
    correction_verdict: Verdict = Verdict.KEPT
    flags: tuple[str, ...] = ()

    @property
    def kept(self) -> bool:
        return self.correction_verdict is Verdict.KEPT


@dataclass(frozen=True, eq=False)
class SceneGraph(_StructEq):
    nodes: tuple[GraphNode, ...]
    edges: tuple[GraphEdge, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "edges", tuple(self.edges))

    def node(self, cluster_id: int) -> GraphNode:
        for n in self.nodes:
            if n.cluster_id == cluster_id:
                return n
        raise KeyError(cluster_id)

    @property
    def node_ids(self) -> list[int]:
        return [n.cluster_id for n in self.nodes]

    @property
    def categories(self) -> list[str]:
        return sorted({n.category for n in self.nodes})

    def kept_edges(self) -> list[GraphEdge]:
        return [e for e in self.edges if e.kept]

    def violations(self) -> list[str]:
        ids = set(self.node_ids)
        out = []
        if len(ids) != len(self.nodes):
            out.append("duplicate node ids")
        for k, e in enumerate(self.edges):
            if e.subject not in ids or e.object not in ids:
                out.append(f"edges[{k}] references a missing node")
            if e.subject == e.object:
                out.append(f"edges[{k}] is a self-edge")
        return out

    def to_dict(self) -> dict:
        return {
            "nodes": [
                {
                    "id": n.cluster_id,
                    "category": n.category,
                    "attributes": list(n.attributes),
                    "feature": [float(x) for x in n.semantic_feature],
                }
                for n in self.nodes
            ],
            "edges": [
                {
                    "subject": e.subject,
                    "predicate": e.predicate,
                    "object": e.object,
                    "support": e.support_views,
                    "verified": e.verified,
                    "verdict": e.correction_verdict.value,
                    "flags": list(e.flags),
                }
                for e in self.edges
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneGraph":
        nodes = [
            GraphNode(int(n["id"]), np.asarray(n["feature"], dtype=np.float64), n["category"], tuple(n["attributes"]))
            for n in d["nodes"]
        ]
        edges = [
            GraphEdge(
                int(e["subject"]),
                e["predicate"],
                int(e["object"]),
                int(e.get("support", 1)),
                bool(e.get("verified", False)),
                Verdict(e.get("verdict", "kept")),
                tuple(e.get("flags", ())),
            )
            for e in d["edges"]
        ]
        return cls(nodes, edges)
