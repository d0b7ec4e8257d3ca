from __future__ import annotations

import numpy as np
import pytest
from conftest import axis_camera, make_bundle
from gradcheck import fd_relative_error, objective, random_problem

from gsgraph.errors import ConfigError
from gsgraph.instance_field import (
    GradientTrace,
    OptConfig,
    RenderedFeatureMap,
    loss_contrast,
    loss_contrast_grad,
    loss_intra,
    loss_intra_grad,
    select_stable_points,
    train_instance_features,
)
from gsgraph.model import ScenePoints
from gsgraph.projection import render_index_map
from gsgraph.synth import SynthSpec, generate


def _map(features):
    grid = np.asarray(features, dtype=np.float64)[None, :, :]
    return RenderedFeatureMap(grid, np.ones(grid.shape[:2], bool))


# ---------------------------------------------------------------------------
# intra-mask smoothing


def test_two_pixel_mask_hand_sum():
    fmap = _map([[1.0, 0.0], [0.0, 1.0]])
    bundle = make_bundle([[0, 0]])
    # mean (0.5, 0.5); each pixel deviates by 0.5 in both coordinates
    assert loss_intra(fmap, bundle) == pytest.approx(1.0)


def test_constant_feature_gives_zero_smoothing():
    fmap = _map([[0.3, -2.0]] * 4)
    assert loss_intra(fmap, make_bundle([[0, 0, 1, 1]])) == 0.0


def test_zero_confidence_annihilates_smoothing():
    fmap = _map([[1.0, 0.0], [0.0, 1.0], [5.0, 5.0]])
    bundle = make_bundle([[0, 0, 1]], confidences={0: 0.0, 1: 0.0})
    assert loss_intra(fmap, bundle) == 0.0


# ---------------------------------------------------------------------------
# contrastive term


def test_two_means_hand_sum():
    fmap = _map([[0.0, 0.0], [1.0, 0.0]])
    bundle = make_bundle([[0, 1]])
    assert loss_contrast(fmap, bundle) == pytest.approx(1 / 3)


def test_identical_means_engage_the_floor():
    fmap = _map([[0.2, 0.2], [0.2, 0.2]])
    bundle = make_bundle([[0, 1]])
    # both ordered pairs hit the floor: (1/6) * (2/(2*1e-6) + 2/(2*1e-6))
    assert loss_contrast(fmap, bundle, 1e-6) == pytest.approx((1 / 6) * 2e6)


def test_contrast_vanishes_for_far_means():
    vals = [loss_contrast(_map([[0.0], [d]]), make_bundle([[0, 1]])) for d in (1e1, 1e3, 1e6)]
    assert vals[0] > vals[1] > vals[2] and vals[2] < 1e-12


def test_single_mask_has_no_contrast():
    assert loss_contrast(_map([[0.0], [1.0]]), make_bundle([[0, 0]])) == 0.0


def test_map_level_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    grid = rng.normal(size=(3, 4, 2))
    seg = np.array([[0, 0, 1, 1], [0, 2, 1, -1], [2, 2, 2, 1]])
    bundle = make_bundle(seg, confidences={0: 0.5, 1: 1.0, 2: 0.8})
    cov = np.ones((3, 4), bool)
    for fn, gfn in ((loss_intra, loss_intra_grad), (loss_contrast, loss_contrast_grad)):
        _, g = gfn(RenderedFeatureMap(grid, cov), bundle)
        fd = np.zeros_like(grid)
        for idx in np.ndindex(grid.shape):
            p, m = grid.copy(), grid.copy()
            p[idx] += 1e-6
            m[idx] -= 1e-6
            fd[idx] = (fn(RenderedFeatureMap(p, cov), bundle) - fn(RenderedFeatureMap(m, cov), bundle)) / 2e-6
        np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-7)


@pytest.mark.parametrize("term", ["smooth", "contrast"])
def test_point_level_gradients_match_finite_differences(term):
    rng = np.random.default_rng(11)
    for _ in range(3):
        pos, bundle, x, _ = random_problem(rng, max_points=20)
        assert fd_relative_error(objective(pos, bundle, term), x, 1 if term == "smooth" else 2) < 1e-4


# ---------------------------------------------------------------------------
# training


def _mask_separation(sc, features, radius=2) -> float:
    """Worst ratio, over views, of the smallest gap between rendered mask
    means to the largest intra-mask RMS deviation."""
    worst = np.inf
    for b in sc.bundles:
        idx = render_index_map(sc.scene.positions, b.camera, radius)
        seg = b.full_segmentation
        sel = (idx >= 0) & (seg >= 0)
        vals, m = features[idx[sel]], seg[sel]
        ids = np.unique(m)
        if len(ids) < 2:
            continue
        means = np.stack([vals[m == i].mean(axis=0) for i in ids])
        spread = max(float(np.sqrt(((vals[m == i] - means[k]) ** 2).sum(axis=1).mean())) for k, i in enumerate(ids))
        gap = min(np.linalg.norm(means[i] - means[j]) for i in range(len(ids)) for j in range(i + 1, len(ids)))
        worst = min(worst, gap / spread)
    return float(worst)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_training_separates_three_objects(seed):
    spec = SynthSpec(n_objects=3, instance_init="random", n_relations=0, n_queries=0, points_per_object=300)
    sc = generate(spec, seed)
    before = _mask_separation(sc, sc.scene.instance_features)
    res = train_instance_features(sc.scene, sc.bundles, OptConfig(iterations=200))
    after = _mask_separation(sc, res.scene.instance_features)
    assert after > 2.0 > before
    assert res.losses[-1, 0] < res.losses[0, 0]


def test_zero_learning_rate_leaves_features_unchanged(synth_small):
    res = train_instance_features(synth_small.scene, synth_small.bundles[:2], OptConfig(lr=0.0, iterations=5))
    np.testing.assert_array_equal(res.scene.instance_features, synth_small.scene.instance_features)


def test_single_mask_smoothing_reaches_constant_features():
    seg = np.zeros((24, 24), dtype=int)
    rng = np.random.default_rng(0)
    pos, _, x, _ = random_problem(rng, max_points=30)
    bundle = make_bundle(seg, camera=axis_camera(24, 24, 12.0, 12.0))
    scene = ScenePoints(pos, x, np.full(len(pos), -1))
    res = train_instance_features(scene, [bundle], OptConfig(iterations=400, radius=1))
    assert (res.losses[:, 2] == 0).all()
    assert res.losses[-1, 1] < 1e-8 * max(res.losses[0, 1], 1.0)
    assert res.non_increasing_fraction() == 1.0


def test_training_needs_a_view(synth_small):
    with pytest.raises(ConfigError):
        train_instance_features(synth_small.scene, [])


def test_bad_optimizer_settings_rejected():
    for kw in ({"iterations": 0}, {"lr": -1.0}, {"window_fraction": 0.0}, {"eps_div": 0.0}, {"init": "zeros"}):
        with pytest.raises(ConfigError):
            OptConfig(**kw)


# ---------------------------------------------------------------------------
# stable points


def _trace(rows):
    rows = np.asarray(rows, dtype=np.float64)
    t = GradientTrace.empty(0, rows.shape[0], rows.shape[1])
    for k, r in enumerate(rows, start=1):
        t.record(k, r)
    return t


def test_all_zero_trace_selects_everything():
    assert select_stable_points(_trace(np.zeros((4, 5))), 1e-3).tolist() == [0, 1, 2, 3, 4]


def test_stable_point_hand_means():
    t = _trace([[0.2, 0.0], [0.2, 0.15]])
    assert select_stable_points(t, 0.1).tolist() == [1]


def test_trace_keeps_only_the_window():
    t = GradientTrace.empty(2, 4, 1)
    for it in range(1, 5):
        t.record(it, np.array([float(it)]))
    assert t.complete and t.norms[:, 0].tolist() == [3.0, 4.0]
