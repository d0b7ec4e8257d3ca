"""On-disk formats for scenes, view bundles and label files, plus mask matching
and object-pair candidacy for upstream extractor output.

File layouts are documented in FORMATS.md at the repository root.
"""
from __future__ import annotations

import json
import logging
import os
import struct
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, EmptyMask, NoOverlap, ParseError, ValidationError
from .model import (
    CameraView,
    Detection,
    RelationCandidate,
    ScenePoints,
    ViewBundle,
    validate_bundle,
    validate_scene,
)

logger = logging.getLogger(__name__)

SCENE_MAGIC = b"GSPT"
SCENE_VERSION = 1
_HEADER = struct.Struct("<4sIQII")  # magic, version, count, feature dim, has_labels
VIEW_FORMAT = "gsgraph-view/1"


@dataclass(frozen=True)
class ExtractionConfig:
    theta: float = 0.8

    def __post_init__(self):
        if not 0.0 < self.theta < 1.0:
            raise ConfigError(f"extraction.theta must be in (0, 1), got {self.theta}")


# ---------------------------------------------------------------------------
# mask matching and pair candidacy


def match_mask_index(foreground_mask, full_segmentation) -> tuple[int, float]:
    """Index of the full-segmentation mask with the highest IoU against
    ``foreground_mask``, and that IoU. Ties go to the lowest index."""
    fg = np.asarray(foreground_mask, dtype=bool)
    seg = np.asarray(full_segmentation)
    if fg.shape != seg.shape:
        raise ValueError(f"shape mismatch: {fg.shape} vs {seg.shape}")
    n_fg = int(fg.sum())
    if n_fg == 0:
        raise EmptyMask("foreground mask has no set pixels")
    labels = seg[seg >= 0]
    if labels.size == 0:
        raise NoOverlap("segmentation has no masks")
    nmax = int(labels.max()) + 1
    area = np.bincount(labels, minlength=nmax)
    inter = np.bincount(seg[fg & (seg >= 0)], minlength=nmax)
    union = area + n_fg - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        iou = np.where(area > 0, inter / union, -1.0)
    best = int(np.argmax(iou))  # first maximum -> lowest index
    if iou[best] <= 0:
        raise NoOverlap("foreground mask overlaps no segmentation mask")
    return best, float(iou[best])


def box_intersection_area(a: Sequence[float], b: Sequence[float]) -> float:
    w = min(a[2], b[2]) - max(a[0], b[0])
    h = min(a[3], b[3]) - max(a[1], b[1])
    return max(0.0, w) * max(0.0, h)


def candidate_pairs(
    detections: Sequence[Detection],
    mask_features: Mapping[int, np.ndarray],
    theta: float,
) -> list[tuple[int, int]]:
    """Detection pairs (i < j) that are semantically close (cosine > theta)
    or whose boxes overlap with positive area."""
    if not 0.0 < theta < 1.0:
        raise ConfigError(f"theta must be in (0, 1), got {theta}")
    n = len(detections)
    if n < 2:
        return []
    feats = np.stack([np.asarray(mask_features[d.mask_index], dtype=np.float64) for d in detections])
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    feats = feats / np.where(norms > 0, norms, 1.0)
    sim = feats @ feats.T
    boxes = np.asarray([d.box for d in detections], dtype=np.float64)
    w = np.minimum(boxes[:, None, 2], boxes[None, :, 2]) - np.maximum(boxes[:, None, 0], boxes[None, :, 0])
    h = np.minimum(boxes[:, None, 3], boxes[None, :, 3]) - np.maximum(boxes[:, None, 1], boxes[None, :, 1])
    overlap = (w > 0) & (h > 0)
    ii, jj = np.nonzero(np.triu((sim > theta) | overlap, k=1))
    return [(int(i), int(j)) for i, j in zip(ii, jj)]


# ---------------------------------------------------------------------------
# atomic writes


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=False) + "\n"


# ---------------------------------------------------------------------------
# scene file


def scene_to_bytes(scene: ScenePoints, include_labels: bool = True) -> bytes:
    m = scene.count
    dim = scene.instance_dim
    has_labels = int(include_labels)
    parts = [
        _HEADER.pack(SCENE_MAGIC, SCENE_VERSION, m, dim, has_labels),
        scene.positions.astype("<f4").tobytes(),
        scene.instance_features.astype("<f8").tobytes(),
    ]
    if has_labels:
        parts.append(scene.labels.astype("<i4").tobytes())
    return b"".join(parts)


def scene_from_bytes(data: bytes, source: str = "<bytes>") -> ScenePoints:
    if len(data) < _HEADER.size:
        raise ParseError(f"{source}: truncated header")
    magic, version, m, dim, has_labels = _HEADER.unpack_from(data)
    if magic != SCENE_MAGIC:
        raise ParseError(f"{source}: bad magic {magic!r}")
    if version != SCENE_VERSION:
        raise ParseError(f"{source}: unsupported version {version}")
    expected = _HEADER.size + m * 12 + m * dim * 8 + (m * 4 if has_labels else 0)
    if len(data) != expected:
        raise ParseError(f"{source}: expected {expected} bytes, found {len(data)}")
    off = _HEADER.size
    pos = np.frombuffer(data, "<f4", m * 3, off).reshape(m, 3).astype(np.float64)
    off += m * 12
    feats = np.frombuffer(data, "<f8", m * dim, off).reshape(m, dim).astype(np.float64)
    off += m * dim * 8
    if has_labels:
        labels = np.frombuffer(data, "<i4", m, off).astype(np.int64)
    else:
        labels = np.full(m, -1, dtype=np.int64)
    return ScenePoints(pos, feats, labels)


def save_scene(path, scene: ScenePoints, include_labels: bool = True) -> None:
    atomic_write_bytes(path, scene_to_bytes(scene, include_labels))


def load_scene(path) -> ScenePoints:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise ParseError(f"{path}: {exc.strerror or exc}") from exc
    scene = scene_from_bytes(data, str(path))
    problems = validate_scene(scene)
    if problems:
        raise ValidationError(f"{path}: invalid scene", problems)
    return scene


def save_labels(path, labels) -> None:
    atomic_write_text(path, "".join(f"{int(x)}\n" for x in np.asarray(labels)))


def load_labels(path) -> np.ndarray:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"{path}: {exc.strerror or exc}") from exc
    try:
        return np.array([int(t) for t in text.split()], dtype=np.int64)
    except ValueError as exc:
        raise ParseError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# view bundles


def _camera_to_dict(cam: CameraView) -> dict:
    return {
        "rotation": cam.rotation.tolist(),
        "translation": cam.translation.tolist(),
        "fx": cam.fx,
        "fy": cam.fy,
        "cx": cam.cx,
        "cy": cam.cy,
        "width": cam.width,
        "height": cam.height,
    }


def save_view(directory, bundle: ViewBundle) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    cam = bundle.camera
    ids = sorted(bundle.mask_features)
    dim = bundle.semantic_dim()
    manifest = {
        "format": VIEW_FORMAT,
        "view_id": bundle.view_id,
        "camera": _camera_to_dict(cam),
        "segmentation": {"file": "segmentation.bin", "dtype": "<i4"},
        "mask_features": {"file": "mask_features.bin", "dtype": "<f8", "ids": ids, "dim": dim},
        "confidences": {str(k): v for k, v in bundle.mask_confidences.items()},
        "confidence_map": None,
        "detections": [
            {"category": det.category, "box": list(det.box), "mask_index": det.mask_index}
            for det in bundle.detections
        ],
        "captions": {str(k): v for k, v in bundle.captions.items()},
        "relations": [
            {
                "subject": r.subject,
                "predicate": r.predicate,
                "object": r.object,
                "subject_category": r.subject_category,
                "object_category": r.object_category,
            }
            for r in bundle.relation_candidates
        ],
    }
    atomic_write_bytes(d / "segmentation.bin", bundle.full_segmentation.astype("<i4").tobytes())
    feats = np.stack([bundle.mask_features[i] for i in ids]) if ids else np.zeros((0, 0))
    atomic_write_bytes(d / "mask_features.bin", feats.astype("<f8").tobytes())
    if bundle.confidence_map is not None:
        manifest["confidence_map"] = {"file": "confidence.bin", "dtype": "<f8"}
        atomic_write_bytes(d / "confidence.bin", bundle.confidence_map.astype("<f8").tobytes())
    atomic_write_text(d / "manifest.json", dump_json(manifest))


def _read_grid(path: Path, dtype: str, shape: tuple[int, ...]) -> np.ndarray:
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise ParseError(f"{path}: {exc.strerror or exc}") from exc
    want = int(np.prod(shape)) * np.dtype(dtype).itemsize
    if len(data) != want:
        raise ParseError(f"{path}: expected {want} bytes for shape {shape}, found {len(data)}")
    return np.frombuffer(data, dtype).reshape(shape)


def load_view(directory) -> ViewBundle:
    """Parse one view directory; raises ParseError or ValidationError."""
    d = Path(directory)
    mpath = d / "manifest.json"
    try:
        man = json.loads(mpath.read_text())
    except OSError as exc:
        raise ParseError(f"{mpath}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"{mpath}: {exc}") from exc
    try:
        if man.get("format") != VIEW_FORMAT:
            raise ParseError(f"{mpath}: unknown format {man.get('format')!r}")
        c = man["camera"]
        cam = CameraView(
            np.asarray(c["rotation"], dtype=np.float64),
            np.asarray(c["translation"], dtype=np.float64),
            float(c["fx"]),
            float(c["fy"]),
            float(c["cx"]),
            float(c["cy"]),
            int(c["width"]),
            int(c["height"]),
        )
        shape = (cam.height, cam.width)
        seg_meta = man["segmentation"]
        seg = _read_grid(d / seg_meta["file"], seg_meta.get("dtype", "<i4"), shape).astype(np.int64)
        fm = man["mask_features"]
        ids = [int(i) for i in fm["ids"]]
        feats = _read_grid(d / fm["file"], fm.get("dtype", "<f8"), (len(ids), int(fm["dim"])))
        mask_features = {i: feats[k].astype(np.float64) for k, i in enumerate(ids)}
        conf = {int(k): float(v) for k, v in man.get("confidences", {}).items()}
        conf_map = None
        if man.get("confidence_map"):
            cm = man["confidence_map"]
            conf_map = _read_grid(d / cm["file"], cm.get("dtype", "<f8"), shape).astype(np.float64)
        detections = []
        for k, det in enumerate(man.get("detections", [])):
            if "mask_index" in det:
                idx = int(det["mask_index"])
            else:
                fg_meta = det["foreground_mask"]
                fg = _read_grid(d / fg_meta["file"], fg_meta.get("dtype", "u1"), shape)
                idx, _ = match_mask_index(fg, seg)
            box = tuple(float(x) for x in det["box"])
            if len(box) != 4:
                raise ParseError(f"{mpath}: detections[{k}].box needs 4 numbers")
            detections.append(Detection(str(det["category"]), box, idx))
        captions = {int(k): str(v) for k, v in man.get("captions", {}).items()}
        relations = [
            RelationCandidate(
                int(r["subject"]),
                str(r["predicate"]),
                int(r["object"]),
                str(r.get("subject_category", "")),
                str(r.get("object_category", "")),
            )
            for r in man.get("relations", [])
        ]
        bundle = ViewBundle(
            str(man.get("view_id", d.name)),
            cam,
            seg,
            mask_features,
            conf,
            detections,
            captions,
            relations,
            conf_map,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{mpath}: malformed manifest ({exc!r})") from exc
    problems = validate_bundle(bundle)
    if problems:
        raise ValidationError(f"{d}: invalid view bundle", problems)
    return bundle


def view_dirs(directory) -> list[Path]:
    root = Path(directory)
    if not root.is_dir():
        raise ParseError(f"{root}: not a directory")
    return sorted(p for p in root.iterdir() if (p / "manifest.json").is_file())


def load_views(directory, threads: int | None = None) -> list[ViewBundle]:
    """Load every view below ``directory``, in parallel, sorted by view id."""
    dirs = view_dirs(directory)
    if not dirs:
        raise ParseError(f"{directory}: no view bundles found")
    with ThreadPoolExecutor(max_workers=threads) as pool:
        bundles = list(pool.map(load_view, dirs))
    return sorted(bundles, key=lambda b: b.view_id)


def save_views(directory, bundles: Sequence[ViewBundle]) -> None:
    for b in bundles:
        save_view(Path(directory) / b.view_id, b)
