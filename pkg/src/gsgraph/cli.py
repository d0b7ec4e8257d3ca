"""``gsgraph`` command line.

Every command exits 0 on success. Failures print one JSON object
(``{"error", "message", "exit_code"[, "violations"]}``) on stderr and exit
with the code of the error class (see FORMATS.md).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import PipelineConfig, parse_overrides
from .errors import ConfigError, GSGraphError, ParseError, ValidationError

logger = logging.getLogger("gsgraph")


def _common(p: argparse.ArgumentParser, top: bool = False) -> None:
    """Global options, accepted before or after the subcommand. Subcommand
    copies default to SUPPRESS so they never clobber a value given earlier."""
    d = (lambda v: v) if top else (lambda v: argparse.SUPPRESS)
    p.add_argument("--config", type=Path, default=d(None), help="pipeline config JSON")
    p.add_argument("--set", dest="overrides", action="append", default=d([]), metavar="SECTION.KEY=VALUE",
                   help="override one config value (repeatable)")
    p.add_argument("--threads", type=int, default=d(None), help="worker pool size (default: logical cores)")
    p.add_argument("-v", "--verbose", action="count", default=d(0), help="more logging (-vv for debug)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gsgraph", description="Open-vocabulary 3D scene graphs from point sets.")
    ap.add_argument("--version", action="version", version=f"gsgraph {__version__}")
    _common(ap, top=True)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="load and validate a scene file and view bundles")
    _common(p)
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--views", type=Path, required=True)
    p.add_argument("--check", action="store_true", help="validate only; exit 4 on any violation")

    p = sub.add_parser("train", help="optimize per-point instance features")
    _common(p)
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--views", type=Path, required=True)
    p.add_argument("--iters", type=int, help="iterations (train.iterations)")
    p.add_argument("--out", type=Path, required=True, help="trained scene file")
    p.add_argument("--loss-csv", type=Path, help="loss curve (default: <out>.loss.csv)")
    p.add_argument("--stable-out", type=Path, help="stable point indices (default: <out>.stable.txt)")

    p = sub.add_parser("cluster", help="Control-Follow clustering")
    _common(p)
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--params", type=Path, help="JSON object of cluster parameters")
    p.add_argument("--stable", type=Path, help="stable point indices from train")
    p.add_argument("--out", type=Path, required=True, help="labels file")

    p = sub.add_parser("build", help="associate clusters and build the scene graph")
    _common(p)
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--views", type=Path, required=True)
    p.add_argument("--labels", type=Path, required=True)
    p.add_argument("--embeddings", type=Path, help="text-embedding table JSON")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--report", type=Path, help="build report JSON (default: <out>.report.json)")

    p = sub.add_parser("query", help="ground a text query to a cluster id")
    _common(p)
    p.add_argument("--graph", type=Path, required=True)
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--labels", type=Path, help="labels file (default: labels stored in the scene)")
    p.add_argument("--text", required=True)
    p.add_argument("--mode", choices=["deterministic", "llm"])
    p.add_argument("--llm-url")
    p.add_argument("--llm-model")
    p.add_argument("--llm-timeout", type=float)

    p = sub.add_parser("synth", help="generate a synthetic scene with ground truth")
    _common(p)
    p.add_argument("--spec", type=Path, help="synth spec JSON (default: built-in spec)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("eval", help="score a run directory against synthetic ground truth")
    _common(p)
    p.add_argument("--pred", type=Path, required=True, help="run directory (labels.txt, graph.json)")
    p.add_argument("--gt", type=Path, required=True, help="synth output directory")
    p.add_argument("--embeddings", type=Path)
    p.add_argument("--out", type=Path, help="write the report here as well as stdout")

    p = sub.add_parser("all", help="train, cluster and build in one go")
    _common(p)
    p.add_argument("--data", type=Path, help="synth output directory (fills --scene/--views/--embeddings)")
    p.add_argument("--scene", type=Path)
    p.add_argument("--views", type=Path)
    p.add_argument("--embeddings", type=Path)
    p.add_argument("--iters", type=int)
    p.add_argument("--out", type=Path, required=True)
    return ap


def _config(args) -> PipelineConfig:
    over = parse_overrides(args.overrides)
    if getattr(args, "iters", None) is not None:
        over.setdefault("train", {})["iterations"] = args.iters
    if getattr(args, "mode", None):
        over.setdefault("grounding", {})["mode"] = args.mode
    for flag, key in (("llm_url", "url"), ("llm_model", "model"), ("llm_timeout", "timeout")):
        v = getattr(args, flag, None)
        if v is not None:
            over.setdefault("grounding", {})[key] = v
    if getattr(args, "llm_url", None) and not getattr(args, "mode", None):
        over["grounding"]["mode"] = "llm"
    return PipelineConfig.load(args.config, over)


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2) + "\n")


def cmd_ingest(args, cfg) -> int:
    from .ingest import candidate_pairs, load_scene, load_views
    from .model import validate_bundle, validate_scene

    scene = load_scene(args.scene)
    bundles = load_views(args.views, args.threads)
    problems = validate_scene(scene)
    for b in bundles:
        problems += validate_bundle(b)
    if problems:
        raise ValidationError(f"{len(problems)} validation problem(s)", problems)
    summary = {"points": scene.count, "instance_dim": scene.instance_dim, "views": len(bundles),
               "masks": sum(len(b.mask_ids) for b in bundles)}
    if not args.check:
        summary["candidate_pairs"] = {
            b.view_id: len(candidate_pairs(b.detections, b.mask_features, cfg.extraction.theta)) for b in bundles
        }
    _emit(summary)
    return 0


def cmd_train(args, cfg) -> int:
    from .ingest import atomic_write_text, load_scene, load_views, save_labels, save_scene
    from .instance_field import train_instance_features
    from .pipeline import loss_csv, stable_points

    scene = load_scene(args.scene)
    bundles = load_views(args.views, args.threads)
    res = train_instance_features(scene, bundles, cfg.train, args.threads)
    save_scene(args.out, res.scene, include_labels=False)
    atomic_write_text(args.loss_csv or args.out.with_suffix(".loss.csv"), loss_csv(res.losses))
    save_labels(args.stable_out or args.out.with_suffix(".stable.txt"), stable_points(res, cfg))
    _emit({"iterations": int(res.losses.shape[0] - 1), "initial_loss": float(res.losses[0, 0]),
           "final_loss": float(res.losses[-1, 0]), "lr": res.lr})
    return 0


def cmd_cluster(args, cfg) -> int:
    from dataclasses import replace

    from .clustering import ClusterParams, control_follow
    from .ingest import load_labels, load_scene, save_labels

    params = cfg.cluster
    if args.params:
        try:
            extra = json.loads(args.params.read_text())
        except OSError as exc:
            raise ParseError(f"{args.params}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.params}: invalid JSON ({exc})") from exc
        known = set(ClusterParams.__dataclass_fields__)
        unknown = sorted(set(extra) - known)
        if unknown:
            raise ConfigError(f"{args.params}: unknown cluster keys {unknown}")
        params = replace(params, **extra)
    scene = load_scene(args.scene)
    stable = load_labels(args.stable) if args.stable else None
    res = control_follow(scene, params, stable)
    save_labels(args.out, res.labels)
    p = res.params
    _emit({"clusters": res.clusters.k, "control_points": res.control.count, "initial_clusters": res.initial.k,
           "birch_threshold": p.birch_threshold, "tau_follow": p.tau_follow, "tau_split": p.tau_split,
           "spatial_weight": p.spatial_weight})
    return 0


def cmd_build(args, cfg) -> int:
    from .ingest import atomic_write_text, dump_json, load_labels, load_scene, load_views
    from .pipeline import load_embedder, report_document, save_graph
    from .scenegraph import build_graph, cluster_centroids

    scene = load_scene(args.scene)
    bundles = load_views(args.views, args.threads)
    labels = load_labels(args.labels)
    if labels.size != scene.count:
        raise ValidationError("labels file length differs from the scene", [f"{labels.size} != {scene.count}"])
    graph, report = build_graph(scene, labels, bundles, cfg.graph, load_embedder(args.embeddings), cfg.radius,
                                cfg.iou_min)
    save_graph(args.out, graph, cluster_centroids(scene.positions, labels))
    atomic_write_text(args.report or args.out.with_suffix(".report.json"), dump_json(report_document(report)))
    _emit({"nodes": len(graph.nodes), "edges": len(graph.edges), "kept_edges": len(graph.kept_edges())})
    return 0


def cmd_query(args, cfg) -> int:
    from .grounding import GroundingRequest, LLMEndpoint, ground
    from .ingest import load_labels, load_scene
    from .pipeline import load_graph
    from .scenegraph import cluster_centroids

    graph = load_graph(args.graph)
    scene = load_scene(args.scene)
    labels = load_labels(args.labels) if args.labels else scene.labels
    if labels.size != scene.count or not (labels >= 0).any():
        raise ConfigError("no cluster labels: pass --labels or a scene file that stores them")
    centroids = cluster_centroids(scene.positions, labels)
    g = cfg.grounding
    endpoint = None
    if g["mode"] == "llm":
        endpoint = LLMEndpoint(g["url"], g["model"], float(g["timeout"]), int(g["retries"]), 0.0,
                               g.get("api_key"), int(g["max_in_flight"]))
    res = ground(GroundingRequest(args.text, g["mode"], endpoint), graph, centroids, params=cfg.graph)
    _emit({"ranked_ids": res.ranked_ids, "scores": res.scores, "trace": res.trace})
    return 0


def cmd_synth(args, cfg) -> int:
    from .synth import SynthSpec, generate

    spec = SynthSpec.load(args.spec) if args.spec else SynthSpec()
    scene = generate(spec, args.seed, args.out, args.threads)
    _emit({"out": str(args.out), "points": scene.scene.count, "objects": len(scene.objects),
           "views": len(scene.bundles), "relations": len(scene.relations), "planted": len(scene.planted),
           "queries": len(scene.queries)})
    return 0


def cmd_eval(args, cfg) -> int:
    from .ingest import atomic_write_text, dump_json
    from .pipeline import evaluate_dirs

    report = evaluate_dirs(args.pred, args.gt, args.embeddings)
    problems = report.violations()
    if problems:
        raise ValidationError("metric out of range", problems)
    doc = report.to_dict()
    if args.out:
        atomic_write_text(args.out, dump_json(doc))
    _emit(doc)
    return 0


def cmd_all(args, cfg) -> int:
    from .ingest import atomic_write_text, dump_json
    from .pipeline import evaluate_dirs, run_all

    scene, views, emb = args.scene, args.views, args.embeddings
    if args.data:
        scene = scene or args.data / "scene.gspt"
        views = views or args.data / "views"
        if emb is None and (args.data / "text_embeddings.json").exists():
            emb = args.data / "text_embeddings.json"
    if scene is None or views is None:
        raise ConfigError("all: give --data or both --scene and --views")
    paths = run_all(scene, views, args.out, cfg, emb, args.threads)
    summary = {k: str(v) for k, v in paths.items()}
    if args.data and (args.data / "ground_truth.json").exists():
        report = evaluate_dirs(args.out, args.data, emb)
        atomic_write_text(args.out / "eval.json", dump_json(report.to_dict()))
        summary["eval"] = str(args.out / "eval.json")
        summary["metrics"] = report.metrics()
    _emit(summary)
    return 0


COMMANDS = {
    "ingest": cmd_ingest, "train": cmd_train, "cluster": cmd_cluster, "build": cmd_build,
    "query": cmd_query, "synth": cmd_synth, "eval": cmd_eval, "all": cmd_all,
}


def _error_json(exc: BaseException, code: int) -> str:
    doc = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    if isinstance(exc, ValidationError) and exc.violations:
        doc["violations"] = list(exc.violations)
    return json.dumps(doc)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.threads is None:
        args.threads = os.cpu_count() or 1
    elif args.threads < 1:
        sys.stderr.write(_error_json(ConfigError("--threads must be >= 1"), 2) + "\n")
        return 2
    try:
        cfg = _config(args)
        return COMMANDS[args.command](args, cfg)
    except GSGraphError as exc:
        sys.stderr.write(_error_json(exc, exc.exit_code) + "\n")
        return exc.exit_code
    except FileNotFoundError as exc:
        err = ParseError(str(exc))
        sys.stderr.write(_error_json(err, err.exit_code) + "\n")
        return err.exit_code
    except Exception as exc:  # pragma: no cover - last-resort reporting
        logger.debug("unhandled error", exc_info=True)
        sys.stderr.write(_error_json(exc, 1) + "\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
