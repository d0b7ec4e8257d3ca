"""Evaluation metrics: segmentation (mIoU / mAcc), cluster purity, relation
precision and recall around correction, and tie-aware grounding recall@k."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .embedding import TextEmbedder
from .model import SceneGraph, Verdict


@dataclass(frozen=True)
class SegmentationScore:
    miou: float
    macc: float
    matching: dict[int, int]  # ground-truth class -> predicted label


def confusion(pred, gt) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(gt classes, predicted labels, count matrix gt x pred)."""
    pred = np.asarray(pred).ravel()
    gt = np.asarray(gt).ravel()
    if pred.shape != gt.shape:
        raise ValueError(f"length mismatch: {pred.size} predictions vs {gt.size} ground-truth labels")
    gcls, gi = np.unique(gt, return_inverse=True)
    pcls, pi = np.unique(pred, return_inverse=True)
    mat = np.zeros((len(gcls), len(pcls)), dtype=np.int64)
    np.add.at(mat, (gi, pi), 1)
    return gcls, pcls, mat


def _scores(mat: np.ndarray, pairs: Iterable[tuple[int, int]], n: int) -> tuple[float, float]:
    gsum = mat.sum(axis=1)
    psum = mat.sum(axis=0)
    ious = [Fraction(0)] * mat.shape[0]
    correct = 0
    for g, p in pairs:
        inter = int(mat[g, p])
        correct += inter
        union = int(gsum[g] + psum[p] - inter)
        ious[g] = Fraction(inter, union) if union else Fraction(0)
    miou = sum(ious, Fraction(0)) / len(ious) if ious else Fraction(0)
    return float(miou), float(Fraction(correct, n)) if n else 0.0


def evaluate_segmentation(pred, gt) -> SegmentationScore:
    """Optimal one-to-one matching of predicted labels to ground-truth classes.

    The matching maximizes correctly labelled points and, among equally good
    matchings, the summed IoU. mAcc is the matched fraction of points; mIoU
    averages IoU over ground-truth classes (unmatched classes score 0).
    """
    gcls, pcls, mat = confusion(pred, gt)
    n = int(mat.sum())
    if n == 0:
        return SegmentationScore(0.0, 0.0, {})
    gsum = mat.sum(axis=1, keepdims=True)
    psum = mat.sum(axis=0, keepdims=True)
    iou = mat / np.maximum(gsum + psum - mat, 1)
    weight = mat + iou / (min(mat.shape) + 1)
    rows, cols = linear_sum_assignment(weight, maximize=True)
    pairs = [(int(r), int(c)) for r, c in zip(rows, cols) if mat[r, c] > 0]
    miou, macc = _scores(mat, pairs, n)
    return SegmentationScore(miou, macc, {int(gcls[r]): int(pcls[c]) for r, c in pairs})


def label_by_similarity(
    labels, graph: SceneGraph, embedder: TextEmbedder, vocabulary: Sequence[str]
) -> np.ndarray:
    """Per-point category index: each cluster takes the vocabulary entry whose
    text embedding is most similar to its node feature (-1 for points whose
    cluster has no node)."""
    text = embedder.embed(list(vocabulary))
    lut = {}
    for node in graph.nodes:
        f = np.asarray(node.semantic_feature, dtype=np.float64)
        lut[node.cluster_id] = int(np.argmax(text @ f)) if f.size else -1
    labels = np.asarray(labels)
    return np.array([lut.get(int(c), -1) for c in labels], dtype=np.int64)


def evaluate_semantic(pred_categories, gt_categories, n_classes: int) -> tuple[float, float]:
    """mIoU / mAcc for labels that already name classes (no matching)."""
    pred = np.asarray(pred_categories)
    gt = np.asarray(gt_categories)
    if pred.shape != gt.shape:
        raise ValueError("length mismatch")
    if gt.size == 0:
        return 0.0, 0.0
    ious = []
    for c in range(n_classes):
        g = gt == c
        if not g.any():
            continue
        p = pred == c
        ious.append(Fraction(int((g & p).sum()), int((g | p).sum())))
    miou = float(sum(ious, Fraction(0)) / len(ious)) if ious else 0.0
    return miou, float(Fraction(int((pred == gt).sum()), gt.size))


def purity(pred, gt) -> float:
    """Fraction of points whose cluster's majority class equals their own;
    unassigned points (-1) count as impure."""
    pred = np.asarray(pred).ravel()
    gt = np.asarray(gt).ravel()
    if pred.size == 0:
        return 0.0
    _, gi = np.unique(gt, return_inverse=True)
    good = 0
    for c in np.unique(pred):
        if c < 0:
            continue
        good += int(np.bincount(gi[pred == c]).max())
    return good / pred.size


def cluster_to_object(pred, gt) -> dict[int, int]:
    """Majority ground-truth label of every predicted cluster (ties -> lowest)."""
    pred = np.asarray(pred).ravel()
    gt = np.asarray(gt).ravel()
    out = {}
    for c in np.unique(pred):
        if c < 0:
            continue
        vals, counts = np.unique(gt[pred == c], return_counts=True)
        out[int(c)] = int(vals[np.argmax(counts)])
    return out


# ---------------------------------------------------------------------------
# relations


@dataclass(frozen=True)
class RelationScore:
    precision: float
    recall: float
    planted_remaining: float  # fraction of planted-false relations present
    n_edges: int


def _score_edges(edges, true: set, planted: set, mapping: Mapping[int, int]) -> RelationScore:
    mapped = {(mapping.get(e.subject), e.predicate, mapping.get(e.object)) for e in edges}
    mapped = {m for m in mapped if m[0] is not None and m[2] is not None and m[0] != m[2]}
    tp = len(mapped & true)
    precision = tp / len(mapped) if mapped else 1.0
    recall = tp / len(true) if true else 1.0
    remaining = len(mapped & planted) / len(planted) if planted else 0.0
    return RelationScore(precision, recall, remaining, len(mapped))


def evaluate_relations(
    graph: SceneGraph,
    true_relations: Iterable[tuple[int, str, int]],
    planted: Iterable[tuple[int, str, int]] = (),
    mapping: Mapping[int, int] | None = None,
) -> tuple[RelationScore, RelationScore]:
    """(before correction, after correction) scores.

    "Before" counts every edge in the graph regardless of its correction
    verdict; "after" counts kept edges only. ``mapping`` sends cluster ids
    to ground-truth object ids (identity by default); edges are compared as
    distinct (subject, predicate, object) triples.
    """
    true = {(int(s), p, int(o)) for s, p, o in true_relations}
    plant = {(int(s), p, int(o)) for s, p, o in planted}
    mp = mapping if mapping is not None else {n: n for n in graph.node_ids}
    before = _score_edges(graph.edges, true, plant, mp)
    after = _score_edges(graph.kept_edges(), true, plant, mp)
    return before, after


def uncorrected(graph: SceneGraph) -> SceneGraph:
    """The same graph with every correction verdict reset to kept."""
    return SceneGraph(graph.nodes, [replace(e, correction_verdict=Verdict.KEPT) for e in graph.edges])


# ---------------------------------------------------------------------------
# grounding


def recall_at_k(ranked: Sequence[int], scores: Sequence[float] | None, targets: Iterable[int], k: int) -> float:
    """Probability that a target lands in the top ``k``.

    With ``scores``, candidates sharing the best target's score are treated
    as a tie in uniformly random order; without scores the ranking is taken
    as strict.
    """
    tset = set(targets)
    ranked = list(ranked)
    if not tset or not any(r in tset for r in ranked):
        return 0.0
    if not scores or len(scores) != len(ranked):
        first = next(i for i, r in enumerate(ranked) if r in tset)
        return 1.0 if first < k else 0.0
    best = max(s for r, s in zip(ranked, scores) if r in tset)
    ahead = sum(1 for s in scores if s > best)
    tied = [r for r, s in zip(ranked, scores) if s == best]
    good = sum(1 for r in tied if r in tset)
    slots = k - ahead
    if slots <= 0:
        return 0.0
    bad = len(tied) - good
    if slots > bad:
        return 1.0
    return 1.0 - math.comb(bad, slots) / math.comb(len(tied), slots)


def evaluate_grounding(results, targets, ks: Sequence[int] = (1, 3, 5)) -> dict[str, float]:
    """mR@k over queries. ``results`` holds objects with ``ranked_ids`` and
    ``scores`` (or ``(ranked, scores)`` pairs; ``None`` for failed queries);
    ``targets`` holds the acceptable ids per query."""
    results = list(results)
    targets = [t if isinstance(t, (set, frozenset, list, tuple)) else [t] for t in targets]
    if len(results) != len(targets):
        raise ValueError("results and targets differ in length")
    out = {}
    for k in ks:
        vals = []
        for res, tg in zip(results, targets):
            if res is None:
                vals.append(0.0)
                continue
            ranked, scores = (res.ranked_ids, res.scores) if hasattr(res, "ranked_ids") else res
            vals.append(recall_at_k(ranked, scores, tg, k))
        out[f"mR@{k}"] = float(np.mean(vals)) if vals else 0.0
    return out


@dataclass
class EvalReport:
    miou: float
    macc: float
    purity: float
    n_clusters: int
    n_objects: int
    relations_before: RelationScore | None = None
    relations_after: RelationScore | None = None
    grounding: dict[str, float] = field(default_factory=dict)
    positional_recall_before: float | None = None
    positional_recall_after: float | None = None
    semantic_miou: float | None = None
    semantic_macc: float | None = None

    def violations(self) -> list[str]:
        out = []
        for k, v in self.metrics().items():
            if not 0.0 <= v <= 1.0:
                out.append(f"{k}={v} outside [0, 1]")
        return out

    def metrics(self) -> dict[str, float]:
        m = {"mIoU": self.miou, "mAcc": self.macc, "purity": self.purity}
        for tag, r in (("before", self.relations_before), ("after", self.relations_after)):
            if r is not None:
                m[f"relation_precision_{tag}"] = r.precision
                m[f"relation_recall_{tag}"] = r.recall
                m[f"planted_remaining_{tag}"] = r.planted_remaining
        m.update(self.grounding)
        if self.positional_recall_before is not None:
            m["positional_mR@1_before"] = self.positional_recall_before
            m["positional_mR@1_after"] = self.positional_recall_after
        if self.semantic_miou is not None:
            m["semantic_mIoU"] = self.semantic_miou
            m["semantic_mAcc"] = self.semantic_macc
        return m

    def to_dict(self) -> dict:
        d = {k: (asdict(v) if isinstance(v, RelationScore) else v) for k, v in self.__dict__.items()}
        d["metrics"] = self.metrics()
        return d
