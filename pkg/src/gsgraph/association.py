"""2D-3D association: project clusters into views, match footprints to masks
by IoU and fuse matched masks into graph nodes."""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .embedding import TextEmbedder
from .errors import EmbedderUnavailable
from .model import GraphNode, ViewBundle
from .projection import DEFAULT_RADIUS, project_cluster

logger = logging.getLogger(__name__)

IOU_MIN = 0.2
CAPTION_DEDUP_SIM = 0.95
UNKNOWN_CATEGORY = "unknown"


@dataclass(frozen=True)
class ClusterFootprint:
    cluster_id: int
    view_id: str
    grid: np.ndarray


@dataclass(frozen=True)
class Match:
    cluster_id: int
    view_id: str
    mask_index: int
    iou: float


def mask_ious(footprint: np.ndarray, segmentation: np.ndarray) -> dict[int, float]:
    """IoU of a binary footprint against every mask in ``segmentation``."""
    seg = np.asarray(segmentation)
    fp = np.asarray(footprint, dtype=bool)
    if fp.shape != seg.shape:
        raise ValueError(f"shape mismatch: {fp.shape} vs {seg.shape}")
    labels = seg[seg >= 0]
    if labels.size == 0:
        return {}
    n = int(labels.max()) + 1
    area = np.bincount(labels, minlength=n)
    inter = np.bincount(seg[fp & (seg >= 0)], minlength=n)
    union = area + int(fp.sum()) - inter
    return {i: float(inter[i] / union[i]) for i in range(n) if area[i] > 0}


def match_footprint(fp, bundle: ViewBundle, iou_min: float = IOU_MIN) -> tuple[int | None, float]:
    """Best-IoU mask (lowest index on ties) and its IoU; ``None`` below the gate."""
    grid = fp.grid if isinstance(fp, ClusterFootprint) else fp
    ious = mask_ious(grid, bundle.full_segmentation)
    if not ious:
        return None, 0.0
    best = min(ious, key=lambda i: (-ious[i], i))
    if ious[best] < iou_min or ious[best] <= 0:
        return None, ious[best]
    return best, ious[best]


def associate(
    positions: np.ndarray,
    labels: np.ndarray,
    bundles: Sequence[ViewBundle],
    radius: int = DEFAULT_RADIUS,
    iou_min: float = IOU_MIN,
) -> list[Match]:
    """Match every cluster to at most one mask per view."""
    positions = np.asarray(positions, dtype=np.float64)
    labels = np.asarray(labels)
    out = []
    cluster_ids = [int(c) for c in np.unique(labels) if c >= 0]
    members = {c: positions[labels == c] for c in cluster_ids}
    for b in sorted(bundles, key=lambda b: b.view_id):
        for c in cluster_ids:
            grid = project_cluster(members[c], b.camera, radius)
            if not grid.any():
                continue
            idx, iou = match_footprint(grid, b, iou_min)
            if idx is not None:
                out.append(Match(c, b.view_id, idx, iou))
    return out


def mask_owner(matches: Sequence[Match]) -> dict[tuple[str, int], int]:
    """(view, mask) -> cluster with the highest IoU on that mask (lowest id on ties)."""
    best: dict[tuple[str, int], Match] = {}
    for m in matches:
        key = (m.view_id, m.mask_index)
        cur = best.get(key)
        if cur is None or (m.iou, -m.cluster_id) > (cur.iou, -cur.cluster_id):
            best[key] = m
    return {k: v.cluster_id for k, v in best.items()}


def _dedup_captions(captions: list[str], embedder: TextEmbedder | None) -> list[str]:
    seen: list[str] = []
    for c in captions:
        if c and c not in seen:
            seen.append(c)
    if embedder is None or len(seen) < 2:
        return seen
    try:
        vecs = embedder.embed(seen)
    except EmbedderUnavailable:
        return seen
    keep: list[int] = []
    for i in range(len(seen)):
        if all(float(vecs[i] @ vecs[j]) <= CAPTION_DEDUP_SIM for j in keep):
            keep.append(i)
    return [seen[i] for i in keep]


@dataclass
class Aggregation:
    nodes: list[GraphNode]
    unmatched: list[int] = field(default_factory=list)


def aggregate_nodes(
    matches: Sequence[Match],
    bundles: Sequence[ViewBundle],
    cluster_ids: Sequence[int] | None = None,
    embedder: TextEmbedder | None = None,
) -> Aggregation:
    """Fuse matched masks into one node per cluster.

    Feature: L2-normalised mean of matched mask features. Category:
    plurality of detections on the matched masks (ties -> alphabetical).
    Attributes: matched captions with duplicates removed. Views are visited
    in view-id order so the result does not depend on input ordering.
    """
    by_view = {b.view_id: b for b in bundles}
    per_cluster: dict[int, list[Match]] = {}
    for m in sorted(matches, key=lambda m: (m.view_id, m.cluster_id)):
        per_cluster.setdefault(m.cluster_id, []).append(m)
    wanted = sorted(set(cluster_ids) if cluster_ids is not None else per_cluster)
    nodes, unmatched = [], []
    for c in wanted:
        ms = per_cluster.get(c, [])
        if not ms:
            unmatched.append(c)
            logger.info("cluster %d matched no mask in any view; omitted", c)
            continue
        feats, votes, caps = [], Counter(), []
        for m in ms:
            b = by_view[m.view_id]
            if m.mask_index in b.mask_features:
                feats.append(b.mask_features[m.mask_index])
            for det in b.detections:
                if det.mask_index == m.mask_index:
                    votes[det.category] += 1
            if m.mask_index in b.captions:
                caps.append(b.captions[m.mask_index])
        if feats:
            mean = np.sum(feats, axis=0) / len(feats)
            norm = np.linalg.norm(mean)
            feat = mean / norm if norm > 0 else mean
        else:
            feat = np.zeros(max((b.semantic_dim() for b in bundles), default=0))
        category = min(votes, key=lambda k: (-votes[k], k)) if votes else UNKNOWN_CATEGORY
        nodes.append(GraphNode(c, feat, category, tuple(_dedup_captions(caps, embedder))))
    return Aggregation(nodes, unmatched)
