"""Synthetic scenes with known ground truth.

A scene is a handful of boxes and spheres resting on the z=0 ground plane
(some stacked on boxes, some placed next to each other), sampled as surface
points and seen by a ring of pinhole cameras. Masks are z-buffered renders of
the object points through the same projector the pipeline uses, so every
mask is an exact projection of its object.

Relations are certified with the same geometric checks the graph builder
runs: true relations pass with a margin, planted false ones fail with a
margin. Planted relations are preferably "confusers": a same-category twin
of a true relation's subject that does not satisfy it, which is the case
geometric correction exists to resolve.
"""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .association import mask_ious
from .errors import ParseError, SpecError
from .ingest import atomic_write_text, dump_json, save_labels, save_scene, save_views
from .model import (
    CameraView,
    Detection,
    GraphEdge,
    GraphNode,
    RelationCandidate,
    SceneGraph,
    ScenePoints,
    ViewBundle,
)
from .projection import project_cluster, render_index_map
from .scenegraph import CorrectionParams, check_adjacency, check_contact, scene_scale

logger = logging.getLogger(__name__)

GT_FORMAT = "gsgraph-synth/1"
VOCABULARY = ("cup", "table", "chair", "book", "lamp", "plant", "box", "ball")
COLORS = ("red", "green", "blue", "white", "black", "yellow", "brown", "gray")
PREDICATE_CLASS = {
    "on": "contact",
    "in front of": "direction",
    "behind": "direction",
    "above": "direction",
    "below": "direction",
    "next to": "adjacency",
}
DIRECTION_MARGIN = 0.05
ADJ_TRUE_FACTOR = 0.85
ADJ_FALSE_FACTOR = 1.2
VISIBLE_IOU = 0.5
VISIBLE_PIXELS = 12
PLACEMENT_GAP = 0.25
ADJACENT_GAP = 0.03


@dataclass(frozen=True)
class SynthSpec:
    """Generator settings. ``false_fraction`` plants ``round(f * n_relations)``
    false relations on top of ``n_relations`` true ones."""

    n_objects: int = 6
    points_per_object: int = 400
    shapes: tuple[str, ...] = ("box", "sphere")
    vocabulary: tuple[str, ...] = VOCABULARY
    semantic_dim: int = 8
    semantic_noise: float = 0.15
    mask_feature_noise: float = 0.0
    instance_dim: int = 6
    instance_noise: float = 0.05
    instance_separation: float = 10.0
    instance_init: str = "separated"
    n_views: int = 8
    image_width: int = 320
    image_height: int = 240
    fov_deg: float = 60.0
    radius: int = 2
    stack_prob: float = 0.3
    adjacent_prob: float = 0.3
    n_relations: int = 10
    false_fraction: float = 0.3
    mask_confidence_noise: float = 0.0
    n_queries: int = 12
    prune_hidden: bool = True

    def __post_init__(self):
        object.__setattr__(self, "shapes", tuple(self.shapes))
        object.__setattr__(self, "vocabulary", tuple(self.vocabulary))
        problems = []
        if self.n_objects < 1:
            problems.append("n_objects must be >= 1")
        if self.points_per_object < 8:
            problems.append("points_per_object must be >= 8")
        if not self.shapes or set(self.shapes) - {"box", "sphere"}:
            problems.append("shapes must be a nonempty subset of {box, sphere}")
        if not self.vocabulary or len(set(self.vocabulary)) != len(self.vocabulary):
            problems.append("vocabulary must be nonempty and duplicate-free")
        if self.semantic_dim < len(self.vocabulary):
            problems.append("semantic_dim must be >= vocabulary size (one axis per category)")
        if self.instance_dim < 1:
            problems.append("instance_dim must be >= 1")
        if self.instance_noise < 0 or self.semantic_noise < 0 or self.mask_feature_noise < 0:
            problems.append("noise levels must be >= 0")
        if self.instance_separation <= 0:
            problems.append("instance_separation must be > 0")
        if self.instance_init not in ("separated", "random"):
            problems.append("instance_init must be 'separated' or 'random'")
        if self.n_views < 0:
            problems.append("n_views must be >= 0")
        if self.image_width < 8 or self.image_height < 8:
            problems.append("image size must be at least 8x8")
        if not 10.0 <= self.fov_deg <= 150.0:
            problems.append("fov_deg must be in [10, 150]")
        if self.radius < 0:
            problems.append("radius must be >= 0")
        for name in ("stack_prob", "adjacent_prob", "mask_confidence_noise"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                problems.append(f"{name} must be in [0, 1]")
        if not 0.0 <= self.false_fraction < 1.0:
            problems.append("false_fraction must be in [0, 1)")
        if self.n_relations < 0 or self.n_queries < 0:
            problems.append("n_relations and n_queries must be >= 0")
        if problems:
            raise SpecError("invalid synth spec: " + "; ".join(problems))

    @property
    def n_false(self) -> int:
        return int(round(self.false_fraction * self.n_relations))

    @classmethod
    def from_dict(cls, d: Mapping) -> "SynthSpec":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise SpecError(f"unknown synth spec keys: {unknown}")
        return cls(**dict(d))

    @classmethod
    def load(cls, path) -> "SynthSpec":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ParseError(f"{path}: {exc}") from exc
        if not isinstance(data, dict):
            raise SpecError(f"{path}: spec must be a JSON object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shapes"] = list(self.shapes)
        d["vocabulary"] = list(self.vocabulary)
        return d


@dataclass(frozen=True)
class SynthObject:
    id: int
    shape: str
    category: str
    center: tuple[float, float, float]
    size: tuple[float, float, float]  # full extents; spheres use the diameter
    yaw: float
    support: int | None
    caption: str
    semantic_feature: np.ndarray = field(repr=False)
    instance_code: np.ndarray = field(repr=False)

    @property
    def footprint_radius(self) -> float:
        if self.shape == "sphere":
            return self.size[0] / 2
        return 0.5 * math.hypot(self.size[0], self.size[1])

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "shape": self.shape,
            "category": self.category,
            "center": [float(x) for x in self.center],
            "size": [float(x) for x in self.size],
            "yaw": float(self.yaw),
            "support": self.support,
            "caption": self.caption,
            "semantic_feature": [float(x) for x in self.semantic_feature],
        }


@dataclass(frozen=True)
class SynthRelation:
    subject: int
    predicate: str
    object: int
    cls: str
    kind: str = "true"  # "true", "confuser" or "random"
    certificate: Mapping | None = None

    @property
    def key(self) -> tuple[int, str, int]:
        return (self.subject, self.predicate, self.object)

    def to_dict(self) -> dict:
        d = {"subject": self.subject, "predicate": self.predicate, "object": self.object, "class": self.cls}
        if self.kind != "true":
            d["kind"] = self.kind
            d["certificate"] = dict(self.certificate or {})
        return d


@dataclass
class SynthScene:
    spec: SynthSpec
    seed: int
    objects: list[SynthObject]
    scene: ScenePoints
    labels: np.ndarray
    bundles: list[ViewBundle] = field(default_factory=list)
    relations: list[SynthRelation] = field(default_factory=list)
    planted: list[SynthRelation] = field(default_factory=list)
    queries: list[dict] = field(default_factory=list)

    @property
    def centroids(self) -> dict[int, np.ndarray]:
        pos = self.scene.positions.astype(np.float64)
        return {o.id: pos[self.labels == o.id].mean(axis=0) for o in self.objects}

    def text_embeddings(self) -> dict[str, list[float]]:
        dim = self.spec.semantic_dim
        out = {}
        for k, c in enumerate(self.spec.vocabulary):
            v = np.zeros(dim)
            v[k] = 1.0
            out[c] = [float(x) for x in v]
        return out

    def ground_truth(self) -> dict:
        return {
            "format": GT_FORMAT,
            "seed": self.seed,
            "spec": self.spec.to_dict(),
            "scene_scale": scene_scale(self.scene.positions),
            "objects": [o.to_dict() for o in self.objects],
            "labels_file": "gt_labels.txt",
            "relations": [r.to_dict() for r in self.relations],
            "planted": [r.to_dict() for r in self.planted],
            "queries": self.queries,
            "views": [b.view_id for b in self.bundles],
        }

    def write(self, out) -> Path:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        save_scene(out / "scene.gspt", self.scene, include_labels=False)
        save_labels(out / "gt_labels.txt", self.labels)
        save_views(out / "views", self.bundles)
        atomic_write_text(out / "ground_truth.json", dump_json(self.ground_truth()))
        atomic_write_text(out / "text_embeddings.json", dump_json(self.text_embeddings()))
        atomic_write_text(out / "spec.json", dump_json(self.spec.to_dict()))
        return out


# ---------------------------------------------------------------------------
# layout and point sampling


def _layout(spec: SynthSpec, rng: np.random.Generator) -> list[dict]:
    half = max(2.0, 0.8 * math.sqrt(spec.n_objects))
    adj_reach = 0.8 * 0.1 * (2 * math.sqrt(2) * half)
    placed: list[dict] = []

    def clear(c, rf, skip=None) -> bool:
        for p in placed:
            if p["support"] is not None or p is skip:
                continue
            gap = ADJACENT_GAP if skip is not None and p is skip else PLACEMENT_GAP
            if math.hypot(c[0] - p["center"][0], c[1] - p["center"][1]) < rf + p["rf"] + gap:
                return False
        return abs(c[0]) <= half and abs(c[1]) <= half

    for i in range(spec.n_objects):
        shape = str(spec.shapes[int(rng.integers(len(spec.shapes)))])
        bases = [p for p in placed if p["shape"] == "box" and p["support"] is None and not p["loaded"]]
        if bases and rng.random() < spec.stack_prob:
            base = bases[int(rng.integers(len(bases)))]
            base["loaded"] = True
            bx, by, bz = base["size"]
            top = base["center"][2] + bz / 2
            if shape == "box":
                size = (bx * rng.uniform(0.4, 0.7), by * rng.uniform(0.4, 0.7), rng.uniform(0.12, 0.3))
                z = top + size[2] / 2
            else:
                r = min(bx, by) * rng.uniform(0.2, 0.35)
                size = (2 * r, 2 * r, 2 * r)
                z = top + r
            center = (base["center"][0], base["center"][1], z)
            rf = 0.5 * math.hypot(size[0], size[1]) if shape == "box" else size[0] / 2
            placed.append(
                {"shape": shape, "size": size, "center": center, "yaw": base["yaw"], "support": base["id"],
                 "rf": rf, "loaded": True, "id": i}
            )
            continue
        if shape == "box":
            size = (rng.uniform(0.2, 0.35), rng.uniform(0.2, 0.35), rng.uniform(0.25, 0.6))
            rf = 0.5 * math.hypot(size[0], size[1])
            zc = size[2] / 2
        else:
            r = rng.uniform(0.1, 0.18)
            size = (2 * r, 2 * r, 2 * r)
            rf = r
            zc = r
        yaw = float(rng.uniform(0, math.pi / 2)) if shape == "box" else 0.0
        center = None
        ground = [p for p in placed if p["support"] is None]
        if ground and rng.random() < spec.adjacent_prob:
            for _ in range(24):
                nb = ground[int(rng.integers(len(ground)))]
                d = rf + nb["rf"] + ADJACENT_GAP
                if d > adj_reach:
                    continue
                ang = rng.uniform(0, 2 * math.pi)
                c = (nb["center"][0] + d * math.cos(ang), nb["center"][1] + d * math.sin(ang))
                if clear(c, rf, skip=nb) and all(
                    math.hypot(c[0] - p["center"][0], c[1] - p["center"][1]) >= rf + p["rf"] + ADJACENT_GAP
                    for p in ground
                ):
                    center = c
                    break
        if center is None:
            for _ in range(2000):
                c = (rng.uniform(-half, half), rng.uniform(-half, half))
                if clear(c, rf):
                    center = c
                    break
        if center is None:
            raise SpecError(f"could not place object {i} without overlap; lower n_objects or sizes")
        placed.append(
            {"shape": shape, "size": size, "center": (center[0], center[1], zc), "yaw": yaw, "support": None,
             "rf": rf, "loaded": False, "id": i}
        )
    return placed


def _box_surface(size, n: int, rng: np.random.Generator) -> np.ndarray:
    sx, sy, sz = size
    areas = np.array([sy * sz, sy * sz, sx * sz, sx * sz, sx * sy, sx * sy])
    counts = rng.multinomial(n, areas / areas.sum())
    out = []
    for face, c in enumerate(counts):
        u = rng.uniform(-0.5, 0.5, size=(c, 3)) * np.array([sx, sy, sz])
        axis, sign = divmod(face, 2)
        u[:, axis] = (0.5 if sign == 0 else -0.5) * (sx, sy, sz)[axis]
        out.append(u)
    return np.vstack(out)


def _sphere_surface(r: float, n: int, rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=(n, 3))
    return r * v / np.linalg.norm(v, axis=1, keepdims=True)


def _rot_z(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _separated_codes(n: int, dim: int, min_dist: float, rng: np.random.Generator) -> np.ndarray:
    span = max(1.0, 1.5 * min_dist * n ** (1.0 / dim))
    codes: list[np.ndarray] = []
    for _ in range(200000):
        if len(codes) == n:
            break
        c = rng.uniform(-span, span, size=dim)
        if all(np.linalg.norm(c - o) >= min_dist for o in codes):
            codes.append(c)
    if len(codes) < n:
        raise SpecError("could not draw well-separated instance codes")
    return np.array(codes)


def _categories(n: int, vocab: Sequence[str], rng: np.random.Generator) -> list[str]:
    """Draw categories so that most of them repeat (twins make queries and
    confusers possible)."""
    n_cat = max(1, min(len(vocab), math.ceil(n / 2)))
    picked = sorted(rng.choice(len(vocab), size=n_cat, replace=False).tolist())
    perm = rng.permutation(n)
    return [vocab[picked[int(perm[i]) % n_cat]] for i in range(n)]


def generate_scene(spec: SynthSpec, seed: int) -> SynthScene:
    """Objects and the point cloud only (no views or relations)."""
    rng = np.random.default_rng(seed)
    placed = _layout(spec, rng)
    cats = _categories(len(placed), spec.vocabulary, rng)
    codes = _separated_codes(len(placed), spec.instance_dim, spec.instance_separation * max(spec.instance_noise, 1e-3), rng)
    objects, pos, feats, labels = [], [], [], []
    for p, cat, code in zip(placed, cats, codes):
        e = np.zeros(spec.semantic_dim)
        e[spec.vocabulary.index(cat)] = 1.0
        noise = rng.normal(size=spec.semantic_dim)
        noise /= np.linalg.norm(noise)
        sem = e + spec.semantic_noise * noise
        sem /= np.linalg.norm(sem)
        color = COLORS[int(rng.integers(len(COLORS)))]
        if p["shape"] == "box":
            local = _box_surface(p["size"], spec.points_per_object, rng)
        else:
            local = _sphere_surface(p["size"][0] / 2, spec.points_per_object, rng)
        world = local @ _rot_z(p["yaw"]).T + np.asarray(p["center"])
        obj = SynthObject(
            p["id"], p["shape"], cat, tuple(float(x) for x in p["center"]), tuple(float(x) for x in p["size"]),
            float(p["yaw"]), p["support"], f"{color} {cat}", sem, code,
        )
        objects.append(obj)
        pos.append(world)
        if spec.instance_init == "separated":
            feats.append(code + rng.normal(scale=spec.instance_noise, size=(len(world), spec.instance_dim)))
        else:
            feats.append(rng.normal(size=(len(world), spec.instance_dim)))
        labels.append(np.full(len(world), p["id"], dtype=np.int64))
    positions = np.vstack(pos).astype(np.float32)
    scene = ScenePoints(positions, np.vstack(feats), np.full(len(positions), -1, dtype=np.int64))
    return SynthScene(spec, seed, objects, scene, np.concatenate(labels))


# ---------------------------------------------------------------------------
# cameras and rendering


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> tuple[np.ndarray, np.ndarray]:
    """World-to-camera rotation and translation (x right, y down, z forward)."""
    eye = np.asarray(eye, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - eye
    f /= np.linalg.norm(f)
    r = np.cross(f, np.asarray(up, dtype=np.float64))
    r /= np.linalg.norm(r)
    d = np.cross(f, r)
    rot = np.stack([r, d, f])
    return rot, -rot @ eye


def camera_ring(spec: SynthSpec, positions: np.ndarray) -> list[CameraView]:
    pos = np.asarray(positions, dtype=np.float64)
    lo, hi = pos.min(axis=0), pos.max(axis=0)
    centre = np.array([(lo[0] + hi[0]) / 2, (lo[1] + hi[1]) / 2, 0.2])
    extent = 0.5 * float(np.linalg.norm(hi[:2] - lo[:2]))
    half = math.radians(spec.fov_deg) / 2
    fx = (spec.image_width / 2) / math.tan(half)
    v_half = math.atan((spec.image_height / 2) / fx)
    dist = 1.1 * extent / math.sin(min(half, v_half)) + 0.5
    elev = math.radians(35.0)
    cams = []
    for k in range(spec.n_views):
        ang = 2 * math.pi * k / spec.n_views + math.pi / 7
        eye = centre + dist * np.array([math.cos(elev) * math.cos(ang), math.cos(elev) * math.sin(ang), math.sin(elev)])
        rot, t = look_at(eye, centre)
        cams.append(
            CameraView(rot, t, fx, fx, spec.image_width / 2, spec.image_height / 2, spec.image_width, spec.image_height)
        )
    return cams


@dataclass
class _Render:
    segmentation: np.ndarray
    visible: dict[int, float]  # object id -> IoU(own footprint, own mask)


def _render(scene: SynthScene, cam: CameraView) -> _Render:
    pos = scene.scene.positions
    idx = render_index_map(pos, cam, scene.spec.radius)
    seg = np.where(idx >= 0, scene.labels[np.maximum(idx, 0)], -1)
    visible = {}
    for o in scene.objects:
        area = int((seg == o.id).sum())
        if area < VISIBLE_PIXELS:
            continue
        fp = project_cluster(pos[scene.labels == o.id], cam, scene.spec.radius)
        iou = mask_ious(fp, seg).get(o.id, 0.0)
        if iou >= VISIBLE_IOU:
            visible[o.id] = iou
    return _Render(seg.astype(np.int64), visible)


# ---------------------------------------------------------------------------
# relations


class _Geometry:
    def __init__(self, scene: SynthScene, params: CorrectionParams):
        self.params = params
        pos = scene.scene.positions.astype(np.float64)
        self.members = {o.id: pos[scene.labels == o.id] for o in scene.objects}
        self.centroids = {i: m.mean(axis=0) for i, m in self.members.items()}
        self.scale = scene_scale(pos)
        self.threshold = params.adjacency_fraction * self.scale

    def holds(self, s: int, predicate: str, o: int) -> tuple[bool, bool, dict]:
        """(certifiably true, certifiably false, certificate)."""
        cls = PREDICATE_CLASS[predicate]
        if cls == "contact":
            touch = check_contact(self.members[s], self.members[o], self.params)
            return touch, not touch, {"class": cls, "hulls_touch": bool(touch)}
        if cls == "direction":
            axis = self.params.axis(predicate)
            dot = float((self.centroids[s] - self.centroids[o]) @ axis)
            return dot >= DIRECTION_MARGIN, dot <= -DIRECTION_MARGIN, {
                "class": cls, "axis": [float(x) for x in axis], "dot": dot,
            }
        d = float(np.linalg.norm(self.centroids[s] - self.centroids[o]))
        true = check_adjacency(self.centroids[s], self.centroids[o], self.scale, self.params.adjacency_fraction * ADJ_TRUE_FACTOR)
        return true, d > ADJ_FALSE_FACTOR * self.threshold, {
            "class": cls, "distance": d, "threshold": self.threshold,
        }


def _true_candidates(scene: SynthScene, geo: _Geometry, covisible: set[tuple[int, int]]) -> dict[str, list]:
    by_class: dict[str, list[SynthRelation]] = {"contact": [], "direction": [], "adjacency": []}
    objs = {o.id: o for o in scene.objects}
    for s in sorted(objs):
        for o in sorted(objs):
            if s == o or (min(s, o), max(s, o)) not in covisible:
                continue
            stacked = objs[s].support == o
            under = objs[o].support == s
            for p, cls in PREDICATE_CLASS.items():
                if p == "on" and not stacked:
                    continue
                if p == "above" and not stacked:
                    continue
                if p == "below" and not under:
                    continue
                ok, _, _ = geo.holds(s, p, o)
                if ok:
                    by_class[cls].append(SynthRelation(s, p, o, cls))
    return by_class


def _sample_relations(scene: SynthScene, geo: _Geometry, covisible, rng) -> tuple[list, list]:
    spec = scene.spec
    by_class = _true_candidates(scene, geo, covisible)
    total = sum(len(v) for v in by_class.values())
    if total < spec.n_relations:
        raise SpecError(
            f"scene supports only {total} certifiable true relations; asked for {spec.n_relations}"
        )
    pools = {k: [v[i] for i in rng.permutation(len(v))] for k, v in by_class.items()}
    chosen: list[SynthRelation] = []
    order = ["contact", "adjacency", "direction"]
    while len(chosen) < spec.n_relations:
        for k in order:
            if pools[k] and len(chosen) < spec.n_relations:
                chosen.append(pools[k].pop(0))
    true_keys = {r.key for r in chosen}
    objs = {o.id: o for o in scene.objects}

    planted: list[SynthRelation] = []
    taken = set(true_keys)
    for r in [chosen[i] for i in rng.permutation(len(chosen))]:
        if len(planted) >= spec.n_false:
            break
        twins = [
            t for t in sorted(objs)
            if t not in (r.subject, r.object) and objs[t].category == objs[r.subject].category
        ]
        for t in twins:
            key = (t, r.predicate, r.object)
            if key in taken or (min(t, r.object), max(t, r.object)) not in covisible:
                continue
            _, false, cert = geo.holds(t, r.predicate, r.object)
            if false:
                planted.append(SynthRelation(t, r.predicate, r.object, r.cls, "confuser", cert))
                taken.add(key)
                break
    pairs = sorted(covisible)
    preds = sorted(PREDICATE_CLASS)
    attempts = 0
    while len(planted) < spec.n_false:
        attempts += 1
        if attempts > 20000 or not pairs:
            raise SpecError(f"could only certify {len(planted)} of {spec.n_false} false relations")
        a, b = pairs[int(rng.integers(len(pairs)))]
        s, o = (a, b) if rng.random() < 0.5 else (b, a)
        p = preds[int(rng.integers(len(preds)))]
        if (s, p, o) in taken:
            continue
        _, false, cert = geo.holds(s, p, o)
        if false:
            planted.append(SynthRelation(s, p, o, PREDICATE_CLASS[p], "random", cert))
            taken.add((s, p, o))
    return chosen, planted


# ---------------------------------------------------------------------------
# queries


def _satisfies(rels: Sequence[SynthRelation], cats: Mapping[int, str], node: int, pred: str, cat: str) -> bool:
    return any(r.subject == node and r.predicate == pred and cats[r.object] == cat for r in rels)


def _queries(scene: SynthScene, rng) -> list[dict]:
    spec = scene.spec
    rels = scene.relations
    cats = {o.id: o.category for o in scene.objects}
    by_cat: dict[str, list[int]] = {}
    for o in scene.objects:
        by_cat.setdefault(o.category, []).append(o.id)
    confused = {(r.predicate, r.object) for r in scene.planted if r.kind == "confuser"}

    def unique(target: int, cons: Sequence[tuple[str, str]]) -> bool:
        return not any(
            all(_satisfies(rels, cats, t, p, c) for p, c in cons)
            for t in by_cat[cats[target]] if t != target
        )

    singles, confused_singles, doubles, sups = [], [], [], []
    seen = set()
    for r in rels:
        cons = [(r.predicate, cats[r.object])]
        key = (cats[r.subject], tuple(cons))
        if key in seen or not unique(r.subject, cons):
            continue
        seen.add(key)
        q = {
            "text": f"the {cats[r.subject]} {r.predicate} the {cats[r.object]}",
            "target_category": cats[r.subject],
            "constraints": [list(c) for c in cons],
            "superlative": None,
            "answer": r.subject,
            "kind": "single",
            "confused": (r.predicate, r.object) in confused,
        }
        (confused_singles if q["confused"] else singles).append(q)
    subjects = sorted({r.subject for r in rels})
    for s in subjects:
        mine = [r for r in rels if r.subject == s]
        for i in range(len(mine)):
            for j in range(i + 1, len(mine)):
                c1 = (mine[i].predicate, cats[mine[i].object])
                c2 = (mine[j].predicate, cats[mine[j].object])
                if c1 == c2 or not unique(s, [c1, c2]):
                    continue
                key = (cats[s], tuple(sorted([c1, c2])))
                if key in seen:
                    continue
                seen.add(key)
                doubles.append({
                    "text": f"the {cats[s]} {c1[0]} the {c1[1]} and {c2[0]} the {c2[1]}",
                    "target_category": cats[s],
                    "constraints": [list(c1), list(c2)],
                    "superlative": None,
                    "answer": s,
                    "kind": "double",
                    "confused": False,
                })
    cent = scene.centroids
    for anchor_cat in sorted(by_cat):
        if len(by_cat[anchor_cat]) != 1:
            continue
        a = by_cat[anchor_cat][0]
        for tcat in sorted(by_cat):
            ts = by_cat[tcat]
            if tcat == anchor_cat or len(ts) < 2:
                continue
            d = sorted((float(np.linalg.norm(cent[t] - cent[a])), t) for t in ts)
            for kind, word, pick, other in (
                ("nearest", "closest to", d[0], d[1]),
                ("farthest", "farthest from", d[-1], d[-2]),
            ):
                if abs(pick[0] - other[0]) < 1e-3:
                    continue
                sups.append({
                    "text": f"the {tcat} {word} the {anchor_cat}",
                    "target_category": tcat,
                    "constraints": [],
                    "superlative": [kind, anchor_cat],
                    "answer": pick[1],
                    "kind": "superlative",
                    "confused": False,
                })
    out = list(confused_singles)
    pools = [singles, doubles, sups]
    pools = [[p[i] for i in rng.permutation(len(p))] for p in pools]
    while len(out) < spec.n_queries and any(pools):
        for p in pools:
            if p and len(out) < spec.n_queries:
                out.append(p.pop(0))
    return out


# ---------------------------------------------------------------------------
# bundles


def _bundle(scene: SynthScene, k: int, cam: CameraView, render: _Render, seed_seq) -> ViewBundle:
    spec = scene.spec
    rng = np.random.default_rng(seed_seq)
    seg = render.segmentation
    present = [int(i) for i in np.unique(seg) if i >= 0]
    objs = {o.id: o for o in scene.objects}
    feats, confs, dets, caps = {}, {}, [], {}
    for i in present:
        f = objs[i].semantic_feature.copy()
        if spec.mask_feature_noise > 0:
            f = f + spec.mask_feature_noise * rng.normal(size=f.shape)
            f /= np.linalg.norm(f)
        feats[i] = f
        confs[i] = 1.0 - spec.mask_confidence_noise * float(rng.uniform()) if spec.mask_confidence_noise else 1.0
        ys, xs = np.nonzero(seg == i)
        dets.append(Detection(objs[i].category, (float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1)), i))
        caps[i] = objs[i].caption
    rels = []
    for r in scene.relations + scene.planted:
        if r.subject in render.visible and r.object in render.visible:
            rels.append(RelationCandidate(r.subject, r.predicate, r.object, objs[r.subject].category, objs[r.object].category))
    return ViewBundle(f"view_{k:03d}", cam, seg, feats, confs, tuple(dets), caps, tuple(rels))


def _prune_hidden(scene: SynthScene, cams: Sequence[CameraView]) -> SynthScene:
    """Drop points that are front-most at no pixel of any view; they get no
    supervision (a splatting pipeline would prune them too). Index maps are
    unchanged by the removal since those points never won a pixel."""
    seen = np.zeros(scene.scene.count, dtype=bool)
    for cam in cams:
        idx = render_index_map(scene.scene.positions, cam, scene.spec.radius)
        seen[idx[idx >= 0]] = True
    labels = scene.labels[seen]
    missing = sorted({o.id for o in scene.objects} - set(np.unique(labels).tolist()))
    if missing:
        raise SpecError(f"objects {missing} are not visible from any camera")
    s = scene.scene
    kept = ScenePoints(s.positions[seen], s.instance_features[seen], s.labels[seen])
    return SynthScene(scene.spec, scene.seed, scene.objects, kept, labels)


def generate(spec: SynthSpec, seed: int, out=None, threads: int | None = None) -> SynthScene:
    """Build a full synthetic scene; writes it to ``out`` when given."""
    scene = generate_scene(spec, seed)
    rng = np.random.default_rng([seed, 1])
    cams = camera_ring(spec, scene.scene.positions) if spec.n_views else []
    if cams and spec.prune_hidden:
        scene = _prune_hidden(scene, cams)
    with ThreadPoolExecutor(max_workers=threads or None) as pool:
        renders = list(pool.map(lambda c: _render(scene, c), cams))
    covisible = set()
    for rd in renders:
        vis = sorted(rd.visible)
        covisible.update((a, b) for i, a in enumerate(vis) for b in vis[i + 1 :])
    geo = _Geometry(scene, CorrectionParams())
    if spec.n_relations or spec.n_false:
        scene.relations, scene.planted = _sample_relations(scene, geo, covisible, rng)
    scene.queries = _queries(scene, rng)
    seeds = np.random.SeedSequence([seed, 2]).spawn(len(cams))
    with ThreadPoolExecutor(max_workers=threads or None) as pool:
        scene.bundles = list(
            pool.map(lambda a: _bundle(scene, a[0], a[1], a[2], a[3]), zip(range(len(cams)), cams, renders, seeds))
        )
    if out is not None:
        scene.write(out)
    return scene


# ---------------------------------------------------------------------------
# ground-truth helpers


def load_ground_truth(directory) -> tuple[dict, np.ndarray]:
    from .ingest import load_labels

    d = Path(directory)
    try:
        gt = json.loads((d / "ground_truth.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"{d / 'ground_truth.json'}: {exc}") from exc
    if gt.get("format") != GT_FORMAT:
        raise ParseError(f"{d}: not a {GT_FORMAT} ground-truth file")
    return gt, load_labels(d / gt.get("labels_file", "gt_labels.txt"))


def graph_from_ground_truth(gt: Mapping) -> SceneGraph:
    """The perfect graph: one node per object, true relations as kept edges."""
    nodes = [
        GraphNode(int(o["id"]), np.asarray(o["semantic_feature"]), o["category"], (o["caption"],))
        for o in gt["objects"]
    ]
    edges = [GraphEdge(int(r["subject"]), r["predicate"], int(r["object"]), 1, True) for r in gt["relations"]]
    return SceneGraph(nodes, edges)
