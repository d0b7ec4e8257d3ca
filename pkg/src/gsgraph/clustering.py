"""Control-Follow clustering.

Control stage: gradient-stable points are downsampled (FPS or an FPFH-style
edge-aware sampler) and clustered with BIRCH on ``[instance feature, w * xyz]``;
the number of clusters falls out of the threshold. Follow stage: every point
joins its nearest center when closer than ``tau_follow`` or founds a new
cluster, with running-mean center updates after each assignment. Refinement
bisects clusters whose instance-feature spread exceeds ``tau_split``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree
from sklearn.cluster import Birch

from . import kernels
from .errors import ConfigError, DegenerateNeighborhood, TooFewPoints
from .model import ClusterSet, ScenePoints

logger = logging.getLogger(__name__)

# default multiplier on the median control-feature nearest-neighbour distance
BIRCH_THRESHOLD_SCALE = 3.0
FOLLOW_SCALE = 1.5
MAX_CONTROL_POINTS = 1000


@dataclass(frozen=True)
class ClusterParams:
    """Thresholds left as ``None`` are derived from the data by :func:`control_follow`."""

    branching_factor: int = 50
    birch_threshold: float | None = None
    tau_follow: float | None = None
    spatial_weight: float | None = None
    tau_split: float | None = None
    sampler: str = "fps"
    control_fraction: float = 0.1
    max_control: int = MAX_CONTROL_POINTS
    k_neighbors: int = 10
    stable_epsilon: float | None = None
    min_split_size: int = 4

    def __post_init__(self):
        for name in ("birch_threshold", "tau_follow", "spatial_weight", "tau_split", "stable_epsilon"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ConfigError(f"cluster.{name} must be > 0, got {v}")
        if self.branching_factor < 2:
            raise ConfigError("cluster.branching_factor must be >= 2")
        if self.sampler not in ("fps", "fpfh"):
            raise ConfigError("cluster.sampler must be 'fps' or 'fpfh'")
        if not 0 < self.control_fraction <= 1:
            raise ConfigError("cluster.control_fraction must be in (0, 1]")
        if self.max_control < 1:
            raise ConfigError("cluster.max_control must be >= 1")
        if self.k_neighbors < 3:
            raise ConfigError("cluster.k_neighbors must be >= 3")


@dataclass(frozen=True)
class ControlPointSet:
    indices: np.ndarray
    features: np.ndarray

    @property
    def count(self) -> int:
        return int(self.indices.size)


# ---------------------------------------------------------------------------
# feature construction


def spatial_weight(scene: ScenePoints) -> float:
    """Feature RMS spread divided by the scene bounding-box diagonal."""
    if scene.count == 0:
        return 0.0
    f = scene.instance_features
    rms = float(np.sqrt(((f - f.mean(axis=0)) ** 2).sum(axis=1).mean()))
    diag = float(np.linalg.norm(scene.positions.max(axis=0) - scene.positions.min(axis=0)))
    return rms / diag if diag > 0 else 0.0


def cluster_features(scene: ScenePoints, w_xyz: float) -> np.ndarray:
    return np.hstack([scene.instance_features, w_xyz * scene.positions])


# ---------------------------------------------------------------------------
# control-point sampling


def _as_index_set(points, n_total: int) -> np.ndarray:
    idx = np.unique(np.asarray(points, dtype=np.int64))
    if idx.size and (idx[0] < 0 or idx[-1] >= n_total):
        raise IndexError("point index out of range")
    return idx


def sample_fps(points, positions, m: int, features=None) -> ControlPointSet:
    """Greedy farthest-point subset of ``points`` (indices into ``positions``).

    The first pick is the point farthest from the subset's centroid, which
    makes the result independent of input order up to index tie-breaks.
    """
    positions = np.asarray(positions, dtype=np.float64)
    idx = _as_index_set(points, len(positions))
    if m < 0 or m > idx.size:
        raise TooFewPoints(f"cannot sample {m} control points from {idx.size}")
    feats = positions if features is None else np.asarray(features, dtype=np.float64)
    if m == 0:
        return ControlPointSet(idx[:0], feats[idx[:0]])
    if m == idx.size:
        return ControlPointSet(idx, feats[idx])
    sub = positions[idx]
    first = int(np.argmax(((sub - sub.mean(axis=0)) ** 2).sum(axis=1)))
    local = kernels.fps(sub, first, m)
    chosen = idx[local]
    return ControlPointSet(chosen, feats[chosen])


def _normals(pts: np.ndarray, nbr: np.ndarray) -> np.ndarray:
    hood = np.concatenate([pts[:, None, :], pts[nbr]], axis=1)
    centred = hood - hood.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centred, centred)
    _, vecs = np.linalg.eigh(cov)
    return vecs[:, :, 0]


def pfh_descriptors(positions, k_neighbors: int = 10, bins: int = 5) -> np.ndarray:
    """Simplified fast point-feature histograms.

    Per neighbour pair, three sign-invariant angles (|n_p.d|, |n_q.d|,
    |n_p.n_q|) are histogrammed; each point's histogram is then augmented
    with the inverse-distance weighted mean of its neighbours' histograms.
    """
    pts = np.asarray(positions, dtype=np.float64)
    n = len(pts)
    k = min(k_neighbors, n - 1)
    if k < 2:
        raise DegenerateNeighborhood("need at least 3 points for neighbourhood normals")
    dist, nbr = cKDTree(pts).query(pts, k=k + 1)
    dist, nbr = dist[:, 1:], nbr[:, 1:]
    coincident = (dist <= 1e-12).all(axis=1)
    if coincident.any():
        raise DegenerateNeighborhood(
            f"{int(coincident.sum())} point(s) have only coincident neighbours (normal undefined)"
        )
    normals = _normals(pts, nbr)
    d = pts[nbr] - pts[:, None, :]
    safe = np.where(dist > 1e-12, dist, 1.0)
    d = d / safe[:, :, None]
    valid = dist > 1e-12
    f1 = np.abs(np.einsum("nj,nkj->nk", normals, d))
    f2 = np.abs(np.einsum("nkj,nkj->nk", normals[nbr], d))
    f3 = np.abs(np.einsum("nj,nkj->nk", normals, normals[nbr]))
    spfh = np.zeros((n, 3 * bins))
    counts = valid.sum(axis=1).astype(np.float64)
    for c, f in enumerate((f1, f2, f3)):
        b = np.minimum((np.clip(f, 0.0, 1.0) * bins).astype(np.int64), bins - 1)
        for j in range(bins):
            spfh[:, c * bins + j] = ((b == j) & valid).sum(axis=1) / counts
    w = np.where(valid, 1.0 / safe, 0.0)
    nb_term = (w[:, :, None] * spfh[nbr]).sum(axis=1) / w.sum(axis=1, keepdims=True)
    return spfh + nb_term


def sample_fpfh(points, positions, m: int, k_neighbors: int = 10, features=None) -> ControlPointSet:
    """The ``m`` points whose histogram lies farthest from the mean histogram.

    Scores are rounded to 12 decimals so that near-symmetric inputs resolve
    ties by index rather than by floating-point noise.
    """
    positions = np.asarray(positions, dtype=np.float64)
    idx = _as_index_set(points, len(positions))
    if k_neighbors < 3:
        raise ConfigError("k_neighbors must be >= 3")
    if m < 0 or m > idx.size:
        raise TooFewPoints(f"cannot sample {m} control points from {idx.size}")
    feats = positions if features is None else np.asarray(features, dtype=np.float64)
    if m == 0:
        return ControlPointSet(idx[:0], feats[idx[:0]])
    desc = pfh_descriptors(positions[idx], k_neighbors)
    score = np.round(np.linalg.norm(desc - desc.mean(axis=0), axis=1), 12)
    order = np.lexsort((np.arange(idx.size), -score))
    chosen = idx[order[:m]]
    return ControlPointSet(chosen, feats[chosen])


# ---------------------------------------------------------------------------
# control stage


def default_birch_threshold(features: np.ndarray) -> float:
    """``BIRCH_THRESHOLD_SCALE`` times the median nearest-neighbour distance."""
    if len(features) < 2:
        return 1e-9
    d, _ = cKDTree(features).query(features, k=2)
    med = float(np.median(d[:, 1]))
    return max(BIRCH_THRESHOLD_SCALE * med, 1e-9)


def _merge_subclusters(features: np.ndarray, sub: np.ndarray, threshold: float) -> np.ndarray:
    """Global phase: single-link over control points. Two subclusters join
    when any of their members lie within ``threshold`` of each other, so
    objects that are spatially extended in G^f chain together while gaps
    wider than the threshold stay cut. Returns a label per control point."""
    n = len(features)
    pairs = cKDTree(features).query_pairs(threshold, output_type="ndarray")
    n_sub = int(sub.max()) + 1
    rows = np.concatenate([pairs[:, 0], np.arange(n)])
    cols = np.concatenate([pairs[:, 1], n + sub])
    graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n + n_sub, n + n_sub))
    _, lab = connected_components(graph, directed=False)
    return lab[:n].astype(np.int64)


def control_cluster(ctrl: ControlPointSet, params: ClusterParams = ClusterParams()) -> ClusterSet:
    """BIRCH over control-point features; ``k`` emerges from the threshold."""
    feats = np.asarray(ctrl.features, dtype=np.float64)
    if len(feats) == 0:
        raise TooFewPoints("control stage needs at least one control point")
    if len(feats) == 1:
        return ClusterSet(feats.copy(), [1], [0])
    threshold = params.birch_threshold or default_birch_threshold(feats)
    birch = Birch(threshold=threshold, branching_factor=params.branching_factor, n_clusters=None)
    sub = birch.fit_predict(feats)
    return ClusterSet.from_assignments(feats, _merge_subclusters(feats, sub, threshold))


def control_radius(ctrl: ControlPointSet, clusters: ClusterSet) -> float:
    """Largest distance from a control point to its cluster center."""
    if clusters.k == 0:
        return 0.0
    d = np.linalg.norm(np.asarray(ctrl.features) - clusters.centers[clusters.assignments], axis=1)
    return float(d.max(initial=0.0))


# ---------------------------------------------------------------------------
# follow stage and refinement


def follow_assign(features: np.ndarray, clusters: ClusterSet, tau_follow: float) -> ClusterSet:
    """Assign every row of ``features`` (ascending index) to the nearest
    running-mean center or a new cluster, then finalize means from the
    resulting partition."""
    features = np.asarray(features, dtype=np.float64)
    centers = clusters.centers.reshape(-1, features.shape[1]) if clusters.k else np.zeros((0, features.shape[1]))
    labels, _, _ = kernels.follow_assign_kernel(features, centers, clusters.member_counts, tau_follow)
    return ClusterSet.from_assignments(features, labels)


def follow_assign_raw(features, clusters: ClusterSet, tau_follow: float):
    """Like :func:`follow_assign` but returns the unfinalized running state
    ``(labels, centers, counts)`` with seeded counts still included."""
    features = np.asarray(features, dtype=np.float64)
    return kernels.follow_assign_kernel(features, clusters.centers, clusters.member_counts, tau_follow)


def _spread(x: np.ndarray) -> float:
    return float(np.sqrt(((x - x.mean(axis=0)) ** 2).sum(axis=1).mean())) if len(x) else 0.0


def _bisect(x: np.ndarray, iters: int = 50) -> np.ndarray:
    """Deterministic 2-means seeded by the farthest-pair heuristic."""
    a = int(np.argmax(((x - x.mean(axis=0)) ** 2).sum(axis=1)))
    b = int(np.argmax(((x - x[a]) ** 2).sum(axis=1)))
    ca, cb = x[a], x[b]
    lab = None
    for _ in range(iters):
        new = (((x - cb) ** 2).sum(axis=1) < ((x - ca) ** 2).sum(axis=1)).astype(np.int64)
        if new.all() or not new.any() or (lab is not None and (new == lab).all()):
            lab = new
            break
        lab = new
        ca, cb = x[lab == 0].mean(axis=0), x[lab == 1].mean(axis=0)
    return lab


def _split_recursive(x: np.ndarray, tau: float, min_size: int) -> np.ndarray:
    """Bisect until every part has spread <= tau; parts numbered by their
    lowest member index."""
    done = []
    stack = [np.arange(len(x))]
    while stack:
        members = stack.pop()
        if len(members) < max(2, min_size) or _spread(x[members]) <= tau:
            done.append(members)
            continue
        half = _bisect(x[members])
        if half.all() or not half.any():
            done.append(members)
            continue
        stack.append(members[half == 1])
        stack.append(members[half == 0])
    lab = np.zeros(len(x), dtype=np.int64)
    for k, members in enumerate(sorted(done, key=lambda mm: int(mm.min()))):
        lab[members] = k
    return lab


def refine_clusters(
    scene: ScenePoints, clusters: ClusterSet, tau_split: float, min_size: int = 4, features=None
) -> ClusterSet:
    """Split clusters whose instance-feature spread exceeds ``tau_split``.

    Only splits; the result is still a partition of all points. ``features``
    are the G^f rows used to recompute centers (defaults to instance
    features padded with zeros for the spatial part).
    """
    inst = scene.instance_features
    gf = features if features is not None else np.hstack([inst, np.zeros((scene.count, 3))])
    labels = clusters.assignments.copy()
    nxt = int(labels.max()) + 1 if labels.size else 0
    for c in range(clusters.k):
        members = np.nonzero(labels == c)[0]
        if len(members) < 2:
            continue
        sub = _split_recursive(inst[members], tau_split, min_size)
        for part in range(1, int(sub.max()) + 1):
            labels[members[sub == part]] = nxt
            nxt += 1
    return ClusterSet.from_assignments(gf, labels)


# ---------------------------------------------------------------------------
# full pipeline


@dataclass(frozen=True)
class ClusteringResult:
    clusters: ClusterSet
    initial: ClusterSet
    control: ControlPointSet
    params: ClusterParams  # with every data-derived threshold filled in

    @property
    def labels(self) -> np.ndarray:
        return self.clusters.assignments


def control_count(n_stable: int, params: ClusterParams) -> int:
    return max(1, min(int(n_stable * params.control_fraction), params.max_control, n_stable))


def control_follow(scene: ScenePoints, params: ClusterParams = ClusterParams(), stable=None) -> ClusteringResult:
    """Run the control, follow and refinement stages on ``scene``.

    ``stable`` restricts control-point candidates (default: all points).
    """
    if scene.count == 0:
        raise TooFewPoints("scene has no points")
    w = params.spatial_weight if params.spatial_weight is not None else spatial_weight(scene)
    gf = cluster_features(scene, w)
    cand = np.arange(scene.count) if stable is None else _as_index_set(stable, scene.count)
    if cand.size == 0:
        logger.warning("no stable points; using all points as control candidates")
        cand = np.arange(scene.count)
    m = control_count(cand.size, params)
    if params.sampler == "fpfh":
        ctrl = sample_fpfh(cand, scene.positions, m, params.k_neighbors, features=gf)
    else:
        ctrl = sample_fps(cand, scene.positions, m, features=gf)
    threshold = params.birch_threshold or default_birch_threshold(ctrl.features)
    initial = control_cluster(ctrl, replace(params, birch_threshold=threshold))
    tau_follow = params.tau_follow or FOLLOW_SCALE * max(threshold, control_radius(ctrl, initial))
    tau_split = params.tau_split or threshold
    resolved = replace(
        params, birch_threshold=threshold, tau_follow=tau_follow, tau_split=tau_split, spatial_weight=w or None
    )
    followed = follow_assign(gf, initial, tau_follow)
    refined = refine_clusters(scene, followed, tau_split, params.min_split_size, features=gf)
    logger.info(
        "control-follow: %d control points, k_c=%d, after follow %d, after refinement %d",
        ctrl.count,
        initial.k,
        followed.k,
        refined.k,
    )
    return ClusteringResult(refined, initial, ctrl, resolved)
