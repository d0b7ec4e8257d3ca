"""Planar convex hulls and a boundary-inclusive intersection test."""
from __future__ import annotations

import numpy as np


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def convex_hull_2d(points) -> np.ndarray:
    """Counter-clockwise hull vertices (Andrew's monotone chain).

    Collinear boundary points are dropped. Degenerate inputs give a 1- or
    2-row array (a point or a segment).
    """
    pts = np.unique(np.asarray(points, dtype=np.float64).reshape(-1, 2), axis=0)
    if len(pts) <= 2:
        return pts
    lower: list = []
    for p in pts:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in pts[::-1]:
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    hull = np.array(lower[:-1] + upper[:-1])
    if len(hull) < 2:
        # every point collinear and only the extremes survived one chain
        return pts[[0, -1]]
    return hull


def _axes(hull: np.ndarray) -> list[np.ndarray]:
    if len(hull) == 1:
        return []
    out = []
    n = len(hull)
    edges = [(hull[i], hull[(i + 1) % n]) for i in range(n if n > 2 else 1)]
    for a, b in edges:
        d = b - a
        out.append(np.array([-d[1], d[0]]))
        if n == 2:
            out.append(d)
    return out


def hulls_intersect(a, b, tol: float = 1e-12) -> bool:
    """True iff two convex hulls share at least one point (touching counts).

    Separating-axis test over both hulls' edge normals; segment hulls also
    contribute their direction and point pairs their difference vector.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    if len(a) == 0 or len(b) == 0:
        return False
    axes = _axes(a) + _axes(b)
    if len(a) == 1 and len(b) == 1:
        axes.append(b[0] - a[0])
    scale = max(1.0, float(np.abs(np.vstack([a, b])).max()))
    for ax in axes:
        nrm = np.linalg.norm(ax)
        if nrm == 0:
            continue
        ax = ax / nrm
        pa, pb = a @ ax, b @ ax
        if pa.max() < pb.min() - tol * scale or pb.max() < pa.min() - tol * scale:
            return False
    if len(a) == 1 and len(b) == 1:
        return bool(np.allclose(a[0], b[0], atol=tol * scale))
    return True


def ground_hulls_touch(points_i, points_j, up=(0.0, 0.0, 1.0), rotation=None) -> bool:
    """Project both point sets onto the ground plane and test hull contact."""
    pi = np.asarray(points_i, dtype=np.float64).reshape(-1, 3)
    pj = np.asarray(points_j, dtype=np.float64).reshape(-1, 3)
    if rotation is not None:
        r = np.asarray(rotation, dtype=np.float64)
        pi, pj = pi @ r.T, pj @ r.T
    basis = ground_basis(up)
    return hulls_intersect(convex_hull_2d(pi @ basis.T), convex_hull_2d(pj @ basis.T))


def ground_basis(up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Two orthonormal in-plane axes for the plane normal to ``up``; for +z
    this is exactly the x/y axes (dropping z)."""
    u = np.asarray(up, dtype=np.float64)
    u = u / np.linalg.norm(u)
    if np.allclose(u, [0, 0, 1]):
        return np.array([[1.0, 0, 0], [0, 1.0, 0]])
    helper = np.array([1.0, 0, 0]) if abs(u[0]) < 0.9 else np.array([0, 1.0, 0])
    e1 = np.cross(u, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(u, e1)
    return np.stack([e1, e2])
