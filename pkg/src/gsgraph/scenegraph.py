"""Edge construction, embedding verification and the geometric correction
checks (ground-plane contact, direction, adjacency, nearest-of-category)."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from .association import IOU_MIN, Match, aggregate_nodes, associate, mask_owner
from .embedding import TextEmbedder
from .errors import CategoryAbsent, ConfigError, EmbedderUnavailable, UnknownPredicateAxis
from .geometry import ground_hulls_touch
from .model import GraphEdge, SceneGraph, ScenePoints, Verdict, ViewBundle
from .projection import DEFAULT_RADIUS

logger = logging.getLogger(__name__)

DIRECTION_EPS = 1e-9

DEFAULT_DIRECTIONAL = {
    "in front of": "+front",
    "behind": "-front",
    "above": "+up",
    "below": "-up",
}


def normalize_predicate(p: str) -> str:
    return " ".join(p.strip().lower().split())


@dataclass(frozen=True)
class CorrectionParams:
    mu: float = 0.9
    front_axis: tuple[float, float, float] = (1.0, 0.0, 0.0)
    up_axis: tuple[float, float, float] = (0.0, 0.0, 1.0)
    adjacency_fraction: float = 0.1
    contact_predicates: frozenset[str] = frozenset({"in", "on"})
    directional_predicates: Mapping[str, object] = field(default_factory=lambda: dict(DEFAULT_DIRECTIONAL))
    adjacency_predicates: frozenset[str] = frozenset({"next to", "near", "beside"})
    pre_rotation: tuple | None = None
    enabled: bool = True

    def __post_init__(self):
        if not 0.0 < self.mu < 1.0:
            raise ConfigError(f"graph.mu must be in (0, 1), got {self.mu}")
        if not 0.0 < self.adjacency_fraction < 1.0:
            raise ConfigError(f"graph.adjacency_fraction must be in (0, 1), got {self.adjacency_fraction}")
        for name in ("front_axis", "up_axis"):
            v = np.asarray(getattr(self, name), dtype=np.float64)
            if v.shape != (3,) or not np.isfinite(v).all() or np.linalg.norm(v) == 0:
                raise ConfigError(f"graph.{name} must be a nonzero 3-vector")
        object.__setattr__(self, "contact_predicates", frozenset(map(normalize_predicate, self.contact_predicates)))
        object.__setattr__(
            self, "adjacency_predicates", frozenset(map(normalize_predicate, self.adjacency_predicates))
        )
        object.__setattr__(
            self,
            "directional_predicates",
            {normalize_predicate(k): v for k, v in dict(self.directional_predicates).items()},
        )
        for p in self.directional_predicates:
            self.axis(p)

    def axis(self, predicate: str) -> np.ndarray:
        """Signed unit axis for a directional predicate."""
        spec = self.directional_predicates.get(normalize_predicate(predicate))
        if spec is None:
            raise UnknownPredicateAxis(f"no axis declared for predicate {predicate!r}")
        if isinstance(spec, str):
            s = spec.strip().lower()
            sign = -1.0 if s.startswith("-") else 1.0
            name = s.lstrip("+-")
            named = {
                "front": self.front_axis,
                "up": self.up_axis,
                "x": (1.0, 0.0, 0.0),
                "y": (0.0, 1.0, 0.0),
                "z": (0.0, 0.0, 1.0),
            }
            if name not in named:
                raise UnknownPredicateAxis(f"unknown axis name {spec!r} for {predicate!r}")
            v = sign * np.asarray(named[name], dtype=np.float64)
        else:
            v = np.asarray(spec, dtype=np.float64)
            if v.shape != (3,) or np.linalg.norm(v) == 0:
                raise UnknownPredicateAxis(f"bad axis {spec!r} for {predicate!r}")
        return v / np.linalg.norm(v)

    def correction_class(self, predicate: str) -> str | None:
        p = normalize_predicate(predicate)
        if p in self.contact_predicates:
            return "contact"
        if p in self.directional_predicates:
            return "direction"
        if p in self.adjacency_predicates:
            return "adjacency"
        return None

    def inverse_pairs(self) -> list[tuple[str, str]]:
        """Directional predicate pairs whose axes are exact opposites."""
        preds = sorted(self.directional_predicates)
        out = []
        for i, a in enumerate(preds):
            for b in preds[i + 1 :]:
                if np.allclose(self.axis(a), -self.axis(b)):
                    out.append((a, b))
        return out


@dataclass(frozen=True)
class RelationTriple:
    subject: int
    predicate: str
    object: int
    subject_category: str
    object_category: str
    support_views: int = 1


# ---------------------------------------------------------------------------
# lifting and verification


def lift_relations(bundles: Sequence[ViewBundle], matches: Sequence[Match]) -> list[RelationTriple]:
    """Turn per-view mask relations into cluster relations, merging repeats."""
    owner = mask_owner(matches)
    merged: dict[tuple[int, str, int], RelationTriple] = {}
    for b in sorted(bundles, key=lambda b: b.view_id):
        for rel in b.relation_candidates:
            s = owner.get((b.view_id, rel.subject))
            o = owner.get((b.view_id, rel.object))
            if s is None or o is None:
                logger.debug("view %s: relation %s dropped, mask unmatched", b.view_id, rel)
                continue
            if s == o:
                logger.debug("view %s: relation %s maps onto one cluster; dropped", b.view_id, rel)
                continue
            key = (s, normalize_predicate(rel.predicate), o)
            cur = merged.get(key)
            if cur is None:
                merged[key] = RelationTriple(s, key[1], o, rel.subject_category, rel.object_category, 1)
            else:
                merged[key] = RelationTriple(
                    s, key[1], o, cur.subject_category, cur.object_category, cur.support_views + 1
                )
    return [merged[k] for k in sorted(merged)]


def verify_relation(
    triple: RelationTriple,
    node_features: Mapping[int, np.ndarray],
    embedder: TextEmbedder | None,
    mu: float,
) -> bool:
    """Both endpoints must resemble one of the two stated categories (> mu).

    Raises EmbedderUnavailable when no embedding can be produced.
    """
    if embedder is None:
        raise EmbedderUnavailable("no text embedder configured")
    te = embedder.embed([triple.subject_category, triple.object_category])
    fs = np.asarray(node_features[triple.subject], dtype=np.float64)
    fo = np.asarray(node_features[triple.object], dtype=np.float64)
    subj = max(float(te[0] @ fs), float(te[1] @ fs))
    obj = max(float(te[0] @ fo), float(te[1] @ fo))
    return subj > mu and obj > mu


# ---------------------------------------------------------------------------
# geometric checks


def check_contact(subject_points, object_points, params: CorrectionParams | None = None) -> bool:
    p = params or CorrectionParams()
    return ground_hulls_touch(subject_points, object_points, p.up_axis, p.pre_rotation)


class DirectionCheck(NamedTuple):
    keep: bool
    indeterminate: bool
    dot: float

    def __bool__(self) -> bool:
        return self.keep


def check_direction(center_i, center_j, predicate: str, params: CorrectionParams | None = None) -> DirectionCheck:
    """Sign test of ``(O_i - O_j) . axis(predicate)``; a near-zero dot keeps
    the edge and marks it indeterminate."""
    p = params or CorrectionParams()
    axis = p.axis(predicate)
    v = np.asarray(center_i, dtype=np.float64) - np.asarray(center_j, dtype=np.float64)
    if p.pre_rotation is not None:
        v = np.asarray(p.pre_rotation, dtype=np.float64) @ v
    dot = float(v @ axis)
    if abs(dot) < DIRECTION_EPS:
        return DirectionCheck(True, True, dot)
    return DirectionCheck(dot > 0, False, dot)


def check_adjacency(center_i, center_j, scene_scale: float, fraction: float = 0.1) -> bool:
    if not scene_scale > 0:
        raise ValueError("scene_scale must be > 0")
    d = float(np.linalg.norm(np.asarray(center_i, dtype=np.float64) - np.asarray(center_j, dtype=np.float64)))
    return d <= fraction * scene_scale


def scene_scale(positions) -> float:
    """Bounding-box diagonal of the scene."""
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    if len(pos) == 0:
        return 0.0
    return float(np.linalg.norm(pos.max(axis=0) - pos.min(axis=0)))


def cluster_centroids(positions, labels) -> dict[int, np.ndarray]:
    positions = np.asarray(positions, dtype=np.float64)
    labels = np.asarray(labels)
    return {int(c): positions[labels == c].mean(axis=0) for c in np.unique(labels) if c >= 0}


def nearest_of_category(
    category: str,
    anchor: int,
    graph: SceneGraph,
    centroids: Mapping[int, np.ndarray],
) -> int:
    """Node of ``category`` whose centroid is nearest the anchor's (lowest id on ties)."""
    cands = sorted(n.cluster_id for n in graph.nodes if n.category == category and n.cluster_id != anchor)
    if not cands:
        raise CategoryAbsent(f"no node of category {category!r}")
    a = np.asarray(centroids[anchor], dtype=np.float64)
    dist = [float(np.linalg.norm(np.asarray(centroids[c]) - a)) for c in cands]
    return cands[int(np.argmin(dist))]


# ---------------------------------------------------------------------------
# graph assembly


@dataclass(frozen=True)
class CorrectionOutcome:
    verdict: Verdict
    flags: tuple[str, ...] = ()


def correct_edge(
    triple: RelationTriple,
    members: Mapping[int, np.ndarray],
    centroids: Mapping[int, np.ndarray],
    scale: float,
    params: CorrectionParams,
) -> CorrectionOutcome:
    """Verdict for one edge; depends only on its own geometry and params."""
    cls = params.correction_class(triple.predicate)
    if cls is None or not params.enabled:
        return CorrectionOutcome(Verdict.KEPT)
    if cls == "contact":
        ok = check_contact(members[triple.subject], members[triple.object], params)
        return CorrectionOutcome(Verdict.KEPT if ok else Verdict.DROPPED_CONTACT)
    if cls == "direction":
        res = check_direction(centroids[triple.subject], centroids[triple.object], triple.predicate, params)
        flags = ("direction_indeterminate",) if res.indeterminate else ()
        return CorrectionOutcome(Verdict.KEPT if res.keep else Verdict.DROPPED_DIRECTION, flags)
    ok = scale > 0 and check_adjacency(
        centroids[triple.subject], centroids[triple.object], scale, params.adjacency_fraction
    )
    return CorrectionOutcome(Verdict.KEPT if ok else Verdict.DROPPED_ADJACENCY)


@dataclass
class BuildReport:
    matches: list[Match] = field(default_factory=list)
    unmatched_clusters: list[int] = field(default_factory=list)
    lifted: list[RelationTriple] = field(default_factory=list)
    failed_verification: list[RelationTriple] = field(default_factory=list)
    embedder_available: bool = True


def build_graph(
    scene: ScenePoints,
    labels: np.ndarray,
    bundles: Sequence[ViewBundle],
    params: CorrectionParams = CorrectionParams(),
    embedder: TextEmbedder | None = None,
    radius: int = DEFAULT_RADIUS,
    iou_min: float = IOU_MIN,
) -> tuple[SceneGraph, BuildReport]:
    """Nodes from association; edges lifted, verified, then corrected.

    Edges failing verification are left out of the graph (listed in the
    report); edges that could not be verified stay with ``verified=False``.
    Corrected-away edges stay in the graph with their drop verdict.
    """
    labels = np.asarray(labels, dtype=np.int64)
    report = BuildReport(embedder_available=embedder is not None)
    report.matches = associate(scene.positions, labels, bundles, radius, iou_min)
    cluster_ids = [int(c) for c in np.unique(labels) if c >= 0]
    agg = aggregate_nodes(report.matches, bundles, cluster_ids, embedder)
    report.unmatched_clusters = agg.unmatched
    node_ids = {n.cluster_id for n in agg.nodes}
    features = {n.cluster_id: n.semantic_feature for n in agg.nodes}
    matches = [m for m in report.matches if m.cluster_id in node_ids]
    report.lifted = lift_relations(bundles, matches)
    members = {c: scene.positions[labels == c] for c in node_ids}
    centroids = {c: members[c].mean(axis=0) for c in node_ids}
    scale = scene_scale(scene.positions)
    edges = []
    for t in report.lifted:
        flags: tuple[str, ...] = ()
        try:
            verified = verify_relation(t, features, embedder, params.mu)
        except EmbedderUnavailable as exc:
            logger.warning("verification skipped for %s %r %s: %s", t.subject, t.predicate, t.object, exc)
            verified, flags = False, ("unverified",)
        else:
            if not verified:
                report.failed_verification.append(t)
                continue
        outcome = correct_edge(t, members, centroids, scale, params)
        edges.append(
            GraphEdge(t.subject, t.predicate, t.object, t.support_views, verified, outcome.verdict, flags + outcome.flags)
        )
    return SceneGraph(agg.nodes, edges), report
