from __future__ import annotations

import itertools

import numpy as np
import pytest

from gsgraph.clustering import (
    ClusterParams,
    ControlPointSet,
    control_cluster,
    control_follow,
    follow_assign,
    follow_assign_raw,
    pfh_descriptors,
    refine_clusters,
    sample_fpfh,
    sample_fps,
)
from gsgraph.errors import ConfigError, TooFewPoints
from gsgraph.evaluate import purity
from gsgraph.model import ClusterSet, ScenePoints
from gsgraph.synth import SynthSpec, generate_scene


def _brute_force_maxmin(pos, m):
    """Best achievable minimum pairwise distance over all m-subsets."""
    best = -1.0
    for sub in itertools.combinations(range(len(pos)), m):
        d = min(np.linalg.norm(pos[a] - pos[b]) for a, b in itertools.combinations(sub, 2))
        best = max(best, d)
    return best


# ---------------------------------------------------------------------------
# farthest point sampling


def test_fps_collinear_points():
    pos = np.array([[0.0, 0, 0], [1, 0, 0], [10, 0, 0]])
    got = sample_fps([0, 1, 2], pos, 2)
    assert sorted(got.indices.tolist()) == [0, 2]
    sel = pos[got.indices]
    assert np.linalg.norm(sel[0] - sel[1]) == _brute_force_maxmin(pos, 2)


def test_fps_exhaustive_returns_everything():
    pos = np.random.default_rng(0).normal(size=(7, 3))
    assert sample_fps(range(7), pos, 7).indices.tolist() == list(range(7))


def test_fps_square_corners_pick_a_diagonal():
    pos = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]])
    got = sorted(sample_fps(range(4), pos, 2).indices.tolist())
    assert got in ([0, 3], [1, 2])


def test_fps_respects_candidate_subset_and_features():
    pos = np.arange(30, dtype=float).reshape(10, 3)
    feats = np.arange(10, dtype=float)[:, None] * 2
    got = sample_fps([2, 5, 7], pos, 2, features=feats)
    assert set(got.indices.tolist()) <= {2, 5, 7}
    np.testing.assert_array_equal(got.features[:, 0], got.indices * 2)


def test_fps_rejects_oversized_requests():
    with pytest.raises(TooFewPoints):
        sample_fps([0, 1], np.zeros((2, 3)), 3)


# ---------------------------------------------------------------------------
# FPFH sampling


def _grid(h=0.05):
    xs = np.arange(-1, 1 + 1e-9, h)
    ys = np.arange(0, 1 + 1e-9, h)
    x, y = np.meshgrid(xs, ys)
    return x.ravel(), y.ravel(), h


def test_fpfh_uniform_plane_is_deterministic_with_index_tie_break():
    x, y, _ = _grid(0.1)
    pos = np.column_stack([x, y, np.zeros_like(x)])
    a = sample_fpfh(range(len(pos)), pos, 6)
    b = sample_fpfh(range(len(pos)), pos, 6)
    np.testing.assert_array_equal(a.indices, b.indices)
    desc = pfh_descriptors(pos, 10)
    score = np.round(np.linalg.norm(desc - desc.mean(axis=0), axis=1), 12)
    chosen = a.indices
    # every unchosen point either scores lower, or ties and has a higher index
    worst = score[chosen].min()
    tie_idx = max(i for i in chosen if score[i] == worst)
    for i in set(range(len(pos))) - set(chosen.tolist()):
        assert score[i] < worst or (score[i] == worst and i > tie_idx)


def test_fpfh_finds_a_crease():
    x, y, h = _grid()
    pos = np.column_stack([x, y, 0.5 * np.abs(x)])
    got = sample_fpfh(range(len(pos)), pos, 5)
    near = np.abs(pos[got.indices, 0]) <= 2 * h
    assert near.sum() >= 4


def test_fpfh_zero_points():
    assert sample_fpfh(range(10), np.random.default_rng(0).normal(size=(10, 3)), 0).count == 0


def test_fpfh_needs_three_neighbours():
    with pytest.raises(ConfigError):
        sample_fpfh(range(10), np.zeros((10, 3)), 2, k_neighbors=2)


# ---------------------------------------------------------------------------
# control stage


def _blobs(n_blobs, per, dim=4, std=0.05, sep=10.0, seed=0):
    rng = np.random.default_rng(seed)
    centers = np.zeros((n_blobs, dim))
    for k in range(n_blobs):
        centers[k, k % dim] = sep * std * (1 + k // dim)
    x = np.concatenate([c + std * rng.normal(size=(per, dim)) for c in centers])
    truth = np.repeat(np.arange(n_blobs), per)
    return x, truth, centers


def test_three_well_separated_blobs():
    x, truth, centers = _blobs(3, 40, sep=40.0)
    cs = control_cluster(ControlPointSet(np.arange(len(x)), x))
    assert cs.k == 3
    oracle = np.argmin(((x[:, None, :] - centers[None]) ** 2).sum(axis=2), axis=1)
    assert purity(cs.assignments, oracle) == 1.0
    assert purity(oracle, cs.assignments) == 1.0


def test_identical_points_form_one_cluster():
    x = np.ones((25, 3))
    assert control_cluster(ControlPointSet(np.arange(25), x)).k == 1


def test_single_point_cluster_center_is_the_point():
    cs = control_cluster(ControlPointSet(np.array([4]), np.array([[0.5, -1.0]])))
    assert cs.k == 1
    np.testing.assert_array_equal(cs.centers[0], [0.5, -1.0])


def test_no_control_points_is_an_error():
    with pytest.raises(TooFewPoints):
        control_cluster(ControlPointSet(np.zeros(0, int), np.zeros((0, 3))))


# ---------------------------------------------------------------------------
# follow stage


def _seed(centers, counts):
    centers = np.asarray(centers, dtype=float)
    return ClusterSet(centers, counts, np.arange(len(centers)))


def test_point_on_a_center_joins_it():
    seeded = _seed([[0.0, 0.0], [5.0, 5.0]], [3, 3])
    labels, centers, counts = follow_assign_raw(np.array([[5.0, 5.0]]), seeded, 0.5)
    assert labels.tolist() == [1]
    np.testing.assert_array_equal(centers[1], [5.0, 5.0])
    assert counts.tolist() == [3, 4]


def test_far_point_starts_a_singleton():
    seeded = _seed([[0.0, 0.0]], [2])
    out = follow_assign(np.array([[0.1, 0.0], [9.0, 9.0]]), seeded, 1.0)
    assert out.k == 2
    assert out.member_counts.tolist() == [1, 1]
    np.testing.assert_array_equal(out.centers[1], [9.0, 9.0])


def test_running_mean_recurrence():
    e = np.array([1.0, 2.0])
    mc = 4
    f, g = np.array([1.5, 2.0]), np.array([1.0, 2.6])
    labels, centers, counts = follow_assign_raw(np.stack([f, g]), _seed([e], [mc]), 5.0)
    assert labels.tolist() == [0, 0]
    np.testing.assert_allclose(centers[0], (f + g + e * mc) / (mc + 2))
    assert counts.tolist() == [mc + 2]


def test_follow_result_is_a_partition_with_exact_means():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(200, 3))
    out = follow_assign(x, _seed(x[:3], [1, 1, 1]), 0.8)
    assert out.violations(x) == []
    assert (out.assignments >= 0).all()


# ---------------------------------------------------------------------------
# refinement


def _scene_from(features):
    features = np.asarray(features, dtype=float)
    return ScenePoints(np.zeros((len(features), 3)), features, np.full(len(features), -1))


def test_two_modes_are_split():
    tau = 0.1
    rng = np.random.default_rng(0)
    a = rng.normal(scale=0.01, size=(20, 2))
    b = a + np.array([5 * tau, 0.0])
    x = np.concatenate([a, b])
    sc = _scene_from(x)
    out = refine_clusters(sc, ClusterSet.from_assignments(x, np.zeros(40, int)), tau)
    assert out.k == 2
    assert purity(out.assignments, np.repeat([0, 1], 20)) == 1.0


def test_tight_cluster_is_unchanged():
    x = np.random.default_rng(0).normal(scale=0.01, size=(30, 2))
    cs = ClusterSet.from_assignments(x, np.zeros(30, int))
    assert refine_clusters(_scene_from(x), cs, 0.5) == ClusterSet.from_assignments(
        np.hstack([x, np.zeros((30, 3))]), np.zeros(30, int)
    )


def test_singleton_is_unchanged():
    x = np.array([[0.0, 0.0], [10.0, 0.0]])
    cs = ClusterSet.from_assignments(x, [0, 1])
    assert refine_clusters(_scene_from(x), cs, 0.1).assignments.tolist() == [0, 1]


# ---------------------------------------------------------------------------
# full pipeline


@pytest.mark.parametrize("sampler", ["fps", "fpfh"])
def test_control_follow_on_a_synthetic_scene(sampler):
    sc = generate_scene(SynthSpec(n_objects=5, points_per_object=600), 3)
    res = control_follow(sc.scene, ClusterParams(sampler=sampler))
    assert res.clusters.k == 5
    assert purity(res.labels, sc.labels) == 1.0
    assert res.params.tau_follow > 0 and res.params.tau_split > 0 and res.params.birch_threshold > 0


def test_control_follow_is_deterministic():
    sc = generate_scene(SynthSpec(n_objects=4), 1)
    a = control_follow(sc.scene)
    b = control_follow(sc.scene)
    np.testing.assert_array_equal(a.labels, b.labels)


def test_stable_subset_restricts_control_points():
    sc = generate_scene(SynthSpec(n_objects=3), 0)
    stable = np.arange(0, sc.scene.count, 2)
    res = control_follow(sc.scene, ClusterParams(), stable)
    assert set(res.control.indices.tolist()) <= set(stable.tolist())


def test_bad_cluster_params_rejected():
    for kw in ({"birch_threshold": 0.0}, {"sampler": "random"}, {"control_fraction": 0.0}, {"branching_factor": 1}):
        with pytest.raises(ConfigError):
            ClusterParams(**kw)
