from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from gsgraph.model import CameraView, Detection, ViewBundle  # noqa: E402
from gsgraph.synth import SynthSpec, generate  # noqa: E402


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def axis_camera(width=16, height=16, fx=10.0, fy=10.0, cx=None, cy=None) -> CameraView:
    """Camera at the origin looking down +z (world frame == camera frame)."""
    return CameraView(
        np.eye(3), np.zeros(3), fx, fy, width / 2 if cx is None else cx, height / 2 if cy is None else cy, width, height
    )


def make_bundle(segmentation, features=None, confidences=None, view_id="v0", camera=None, **kw) -> ViewBundle:
    seg = np.asarray(segmentation, dtype=np.int64)
    ids = sorted(int(i) for i in np.unique(seg) if i >= 0)
    if features is None:
        features = {i: unit(np.eye(max(len(ids), 2))[k]) for k, i in enumerate(ids)}
    if confidences is None:
        confidences = {i: 1.0 for i in ids}
    cam = camera or axis_camera(seg.shape[1], seg.shape[0])
    return ViewBundle(view_id, cam, seg, features, confidences, **kw)


def det(category, box, mask_index) -> Detection:
    return Detection(category, tuple(float(x) for x in box), mask_index)


@pytest.fixture(scope="session")
def synth_small():
    """A default six-object synthetic scene (in memory)."""
    return generate(SynthSpec(), 0)


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth") / "seed0"
    generate(SynthSpec(), 0, out)
    return out
