"""Stage runners shared by the command line and the end-to-end tests."""
from __future__ import annotations

import io
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .clustering import ClusteringResult, control_follow
from .config import PipelineConfig
from .embedding import TableEmbedder, TextEmbedder
from .evaluate import (
    EvalReport,
    cluster_to_object,
    evaluate_grounding,
    evaluate_relations,
    evaluate_segmentation,
    evaluate_semantic,
    label_by_similarity,
    purity,
    uncorrected,
)
from .grounding import QueryConstraints, resolve_deterministic, subgraph
from .ingest import atomic_write_text, dump_json, load_labels, load_scene, load_views, save_labels, save_scene
from .instance_field import GradientTrace, TrainResult, select_stable_points, train_instance_features
from .model import SceneGraph, ScenePoints, ViewBundle
from .scenegraph import BuildReport, build_graph, cluster_centroids

logger = logging.getLogger(__name__)

GRAPH_FORMAT = "gsgraph-graph/1"


def default_stable_epsilon(trace: GradientTrace, factor: float = 2.0) -> float:
    """``factor`` times the median window-mean gradient norm (tiny floor so an
    all-zero trace selects everything)."""
    mean = trace.norms.sum(axis=0) / max(trace.window, 1)
    return max(factor * float(np.median(mean)) if mean.size else 0.0, 1e-12)


def stable_points(result: TrainResult, cfg: PipelineConfig) -> np.ndarray:
    eps = cfg.stable_epsilon or default_stable_epsilon(result.trace, cfg.stable_factor)
    idx = select_stable_points(result.trace, eps)
    logger.info("stable points: %d of %d (epsilon %.3g)", idx.size, result.scene.count, eps)
    return idx


def loss_csv(losses: np.ndarray) -> str:
    buf = io.StringIO()
    buf.write("iteration,total,smoothing,contrastive\n")
    for it, (t, s, c) in enumerate(losses):
        buf.write(f"{it},{float(t)!r},{float(s)!r},{float(c)!r}\n")
    return buf.getvalue()


def graph_document(graph: SceneGraph, centroids=None) -> dict:
    doc = {"format": GRAPH_FORMAT, **graph.to_dict()}
    if centroids is not None:
        for node in doc["nodes"]:
            c = centroids.get(node["id"])
            if c is not None:
                node["center"] = [float(x) for x in c]
    return doc


def save_graph(path, graph: SceneGraph, centroids=None) -> None:
    atomic_write_text(path, dump_json(graph_document(graph, centroids)))


def load_graph(path) -> SceneGraph:
    import json

    from .errors import ParseError

    try:
        doc = json.loads(Path(path).read_text())
        return SceneGraph.from_dict(doc)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ParseError(f"{path}: {exc}") from exc


def load_embedder(path) -> TextEmbedder | None:
    return TableEmbedder.load(path) if path else None


@dataclass
class RunResult:
    trained: TrainResult
    stable: np.ndarray
    clustering: ClusteringResult
    graph: SceneGraph
    report: BuildReport
    centroids: dict


def run_pipeline(
    scene: ScenePoints,
    bundles: Sequence[ViewBundle],
    cfg: PipelineConfig,
    embedder: TextEmbedder | None = None,
    threads: int | None = None,
) -> RunResult:
    trained = train_instance_features(scene, bundles, cfg.train, threads)
    stable = stable_points(trained, cfg)
    clus = control_follow(trained.scene, cfg.cluster, stable)
    labels = clus.labels
    graph, report = build_graph(
        trained.scene, labels, bundles, cfg.graph, embedder, cfg.radius, cfg.iou_min
    )
    return RunResult(trained, stable, clus, graph, report, cluster_centroids(trained.scene.positions, labels))


def report_document(report: BuildReport) -> dict:
    return {
        "matches": len(report.matches),
        "unmatched_clusters": list(report.unmatched_clusters),
        "lifted_relations": len(report.lifted),
        "failed_verification": [
            {"subject": t.subject, "predicate": t.predicate, "object": t.object} for t in report.failed_verification
        ],
        "embedder_available": report.embedder_available,
    }


def run_all(scene_path, views_dir, out_dir, cfg: PipelineConfig, embeddings=None, threads=None) -> dict[str, Path]:
    """Every stage end to end; returns the written paths by role."""
    out = Path(out_dir)
    scene = load_scene(scene_path)
    bundles = load_views(views_dir, threads)
    res = run_pipeline(scene, bundles, cfg, load_embedder(embeddings), threads)
    paths = {
        "trained": out / "trained.gspt",
        "loss": out / "loss.csv",
        "stable": out / "stable.txt",
        "labels": out / "labels.txt",
        "graph": out / "graph.json",
        "build_report": out / "build_report.json",
    }
    save_scene(paths["trained"], res.trained.scene, include_labels=False)
    atomic_write_text(paths["loss"], loss_csv(res.trained.losses))
    save_labels(paths["stable"], res.stable)
    save_labels(paths["labels"], res.clustering.labels)
    save_graph(paths["graph"], res.graph, res.centroids)
    atomic_write_text(paths["build_report"], dump_json(report_document(res.report)))
    return paths


# ---------------------------------------------------------------------------
# evaluation against synthetic ground truth


def constraints_of(query: dict) -> QueryConstraints:
    sup = query.get("superlative")
    return QueryConstraints(
        query["target_category"],
        tuple((p, c) for p, c in query.get("constraints", [])),
        tuple(sup) if sup else None,
    )


def answer_query(graph: SceneGraph, centroids, query: dict):
    """Deterministic resolution of a structured ground-truth query over the
    sub-graph of the categories it mentions; ``None`` when nothing fits."""
    from .errors import CategoryAbsent, NoCandidate

    cons = constraints_of(query)
    cats = {cons.target, *(c for _, c in cons.relations)}
    if cons.superlative:
        cats.add(cons.superlative[1])
    try:
        return resolve_deterministic(cons, subgraph(graph, sorted(cats)), centroids)
    except (NoCandidate, CategoryAbsent):
        return None


def evaluate_run(
    graph: SceneGraph,
    labels: np.ndarray,
    positions: np.ndarray,
    gt: dict,
    gt_labels: np.ndarray,
    embedder: TextEmbedder | None = None,
) -> EvalReport:
    labels = np.asarray(labels)
    seg = evaluate_segmentation(labels, gt_labels)
    mapping = cluster_to_object(labels, gt_labels)
    true = [(r["subject"], r["predicate"], r["object"]) for r in gt["relations"]]
    planted = [(r["subject"], r["predicate"], r["object"]) for r in gt["planted"]]
    before, after = evaluate_relations(graph, true, planted, mapping)
    centroids = cluster_centroids(positions, labels)
    targets_of = {}
    for c, o in mapping.items():
        targets_of.setdefault(o, []).append(c)
    queries = gt.get("queries", [])
    results = [answer_query(graph, centroids, q) for q in queries]
    targets = [targets_of.get(q["answer"], []) for q in queries]
    grounding = evaluate_grounding(results, targets) if queries else {}
    raw = uncorrected(graph)
    before_res = [answer_query(raw, centroids, q) for q in queries]
    pos_before = evaluate_grounding(before_res, targets, (1,))["mR@1"] if queries else None
    pos_after = grounding.get("mR@1") if queries else None
    report = EvalReport(
        seg.miou, seg.macc, purity(labels, gt_labels), len(mapping), len(gt["objects"]),
        before, after, grounding, pos_before, pos_after,
    )
    if embedder is not None:
        vocab = gt["spec"]["vocabulary"]
        obj_cat = {o["id"]: vocab.index(o["category"]) for o in gt["objects"]}
        gt_cat = np.array([obj_cat[int(i)] for i in gt_labels])
        pred_cat = label_by_similarity(labels, graph, embedder, vocab)
        report.semantic_miou, report.semantic_macc = evaluate_semantic(pred_cat, gt_cat, len(vocab))
    return report


def evaluate_dirs(run_dir, gt_dir, embeddings=None) -> EvalReport:
    from .synth import load_ground_truth

    run = Path(run_dir)
    gt, gt_labels = load_ground_truth(gt_dir)
    graph = load_graph(run / "graph.json")
    labels = load_labels(run / "labels.txt")
    scene = load_scene(Path(gt_dir) / "scene.gspt")
    emb = load_embedder(embeddings or (Path(gt_dir) / "text_embeddings.json"))
    return evaluate_run(graph, labels, scene.positions, gt, gt_labels, emb)
