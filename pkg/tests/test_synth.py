from __future__ import annotations

import filecmp
import json

import numpy as np
import pytest

from gsgraph.errors import ParseError, SpecError
from gsgraph.ingest import load_labels, load_scene
from gsgraph.scenegraph import CorrectionParams, check_adjacency, check_contact, check_direction, scene_scale
from gsgraph.synth import (
    GT_FORMAT,
    SynthSpec,
    generate,
    graph_from_ground_truth,
    load_ground_truth,
)


def test_three_boxes_masks_carry_true_features():
    spec = SynthSpec(n_objects=3, shapes=("box",), n_views=8, mask_feature_noise=0.0, n_relations=4)
    sc = generate(spec, 0)
    assert len(sc.bundles) == 8
    truth = {o.id: o.semantic_feature for o in sc.objects}
    assert all(o.shape == "box" for o in sc.objects)
    for b in sc.bundles:
        assert b.mask_features
        for i, f in b.mask_features.items():
            np.testing.assert_array_equal(f, truth[i])


def test_thirty_percent_corruption_plants_three_tagged_relations():
    sc = generate(SynthSpec(n_relations=10, false_fraction=0.3), 0)
    assert len(sc.relations) == 10 and len(sc.planted) == 3
    for r in sc.planted:
        assert r.cls in ("contact", "direction", "adjacency")
        assert r.kind in ("confuser", "random") and r.certificate
    doc = sc.ground_truth()
    assert all("class" in r and "certificate" in r for r in doc["planted"])


def test_same_seed_gives_byte_identical_outputs(tmp_path):
    generate(SynthSpec(), 7, tmp_path / "a", threads=1)
    generate(SynthSpec(), 7, tmp_path / "b", threads=3)
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    match, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", [str(f) for f in files], shallow=False)
    assert mismatch == [] and errors == [] and len(match) == len(files)
    assert not cmp.left_only and not cmp.right_only


def test_different_seeds_differ():
    a = generate(SynthSpec(), 1)
    b = generate(SynthSpec(), 2)
    assert not np.array_equal(a.scene.positions, b.scene.positions)


@pytest.mark.parametrize("seed", range(4))
def test_relations_are_certified_by_the_geometric_checks(seed):
    sc = generate(SynthSpec(), seed)
    p = CorrectionParams()
    pos = sc.scene.positions
    members = {o.id: pos[sc.labels == o.id] for o in sc.objects}
    cent = sc.centroids
    scale = scene_scale(pos)

    def holds(s, pred, o):
        cls = p.correction_class(pred)
        if cls == "contact":
            return check_contact(members[s], members[o])
        if cls == "direction":
            return check_direction(cent[s], cent[o], pred).keep
        return check_adjacency(cent[s], cent[o], scale, p.adjacency_fraction)

    assert all(holds(*r.key) for r in sc.relations)
    assert not any(holds(*r.key) for r in sc.planted)


def test_every_point_is_seen_after_pruning(synth_small):
    from gsgraph.projection import render_index_map

    seen = np.zeros(synth_small.scene.count, bool)
    for b in synth_small.bundles:
        idx = render_index_map(synth_small.scene.positions, b.camera, synth_small.spec.radius)
        seen[idx[idx >= 0]] = True
        assert np.array_equal(b.full_segmentation >= 0, idx >= 0)
    assert seen.all()


def test_queries_have_unique_answers(synth_small):
    graph = graph_from_ground_truth(synth_small.ground_truth())
    assert synth_small.queries
    for q in synth_small.queries:
        assert graph.node(q["answer"]).category == q["target_category"]


def test_written_directory_round_trips(synth_dir, synth_small):
    gt, labels = load_ground_truth(synth_dir)
    assert gt["format"] == GT_FORMAT
    np.testing.assert_array_equal(labels, synth_small.labels)
    scene = load_scene(synth_dir / "scene.gspt")
    assert (scene.labels == -1).all() and scene.count == synth_small.scene.count
    emb = json.loads((synth_dir / "text_embeddings.json").read_text())
    assert sorted(emb) == sorted(synth_small.spec.vocabulary)
    assert SynthSpec.load(synth_dir / "spec.json") == synth_small.spec
    assert load_labels(synth_dir / "gt_labels.txt").size == scene.count


def test_spec_validation():
    with pytest.raises(SpecError):
        SynthSpec(n_objects=0)
    with pytest.raises(SpecError):
        SynthSpec(semantic_dim=3)
    with pytest.raises(SpecError):
        SynthSpec.from_dict({"n_objects": 3, "colour": "red"})


def test_missing_ground_truth_is_a_parse_error(tmp_path):
    with pytest.raises(ParseError):
        load_ground_truth(tmp_path)
