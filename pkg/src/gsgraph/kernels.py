"""Hot inner loops, each with a numba and a pure-numpy implementation.

The public names dispatch on :data:`gsgraph._accel.BACKEND`. Both variants
are importable directly (``*_numpy`` / ``*_numba``) so tests and the
benchmark can compare them; they must return identical results.
"""
from __future__ import annotations

import numpy as np

from ._accel import BACKEND, njit


def disc_offsets(radius: int) -> np.ndarray:
    """Integer (dx, dy) offsets with dx**2 + dy**2 <= radius**2, row-major order."""
    r = int(radius)
    if r < 0:
        raise ValueError("radius must be >= 0")
    d = np.arange(-r, r + 1)
    dy, dx = np.meshgrid(d, d, indexing="ij")
    keep = dx * dx + dy * dy <= r * r
    return np.stack([dx[keep], dy[keep]], axis=1).astype(np.int64)


# ---------------------------------------------------------------------------
# nearest-point-wins rasterization


def rasterize_nearest_numpy(px, py, depth, height, width, offsets):
    """Per-pixel index of the nearest stamping point, -1 where nothing lands.

    ``px``/``py`` are the rounded pixel centres, ``depth`` the camera-frame
    depth; points with depth <= 0 or a centre outside the image are skipped.
    Depth ties go to the lower point index.
    """
    out = np.full(height * width, -1, dtype=np.int64)
    n = px.shape[0]
    ok = (depth > 0) & (px >= 0) & (px < width) & (py >= 0) & (py < height)
    idx = np.nonzero(ok)[0]
    if idx.size == 0 or n == 0:
        return out.reshape(height, width)
    x = px[idx][:, None] + offsets[None, :, 0]
    y = py[idx][:, None] + offsets[None, :, 1]
    pid = np.broadcast_to(idx[:, None], x.shape)
    inside = (x >= 0) & (x < width) & (y >= 0) & (y < height)
    lin = (y * width + x)[inside]
    pid = pid[inside]
    z = depth[pid]
    order = np.lexsort((pid, z, lin))
    lin, pid = lin[order], pid[order]
    first = np.ones(lin.size, dtype=bool)
    first[1:] = lin[1:] != lin[:-1]
    out[lin[first]] = pid[first]
    return out.reshape(height, width)


@njit(cache=True)
def _rasterize_nearest_jit(px, py, depth, height, width, offsets):
    out = np.full(height * width, -1, dtype=np.int64)
    zbuf = np.full(height * width, np.inf)
    for i in range(px.shape[0]):
        z = depth[i]
        if not z > 0:
            continue
        cx = px[i]
        cy = py[i]
        if cx < 0 or cx >= width or cy < 0 or cy >= height:
            continue
        for k in range(offsets.shape[0]):
            x = cx + offsets[k, 0]
            y = cy + offsets[k, 1]
            if x < 0 or x >= width or y < 0 or y >= height:
                continue
            lin = y * width + x
            # strict '<' keeps the lower index on depth ties
            if z < zbuf[lin]:
                zbuf[lin] = z
                out[lin] = i
    return out.reshape(height, width)


def rasterize_nearest_numba(px, py, depth, height, width, offsets):
    return _rasterize_nearest_jit(
        np.ascontiguousarray(px, dtype=np.int64),
        np.ascontiguousarray(py, dtype=np.int64),
        np.ascontiguousarray(depth, dtype=np.float64),
        int(height),
        int(width),
        np.ascontiguousarray(offsets, dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# coverage stamping (no depth test)


def stamp_coverage_numpy(px, py, depth, height, width, offsets):
    out = np.zeros(height * width, dtype=bool)
    ok = (depth > 0) & (px >= 0) & (px < width) & (py >= 0) & (py < height)
    if not ok.any():
        return out.reshape(height, width)
    x = px[ok][:, None] + offsets[None, :, 0]
    y = py[ok][:, None] + offsets[None, :, 1]
    inside = (x >= 0) & (x < width) & (y >= 0) & (y < height)
    out[(y * width + x)[inside]] = True
    return out.reshape(height, width)


@njit(cache=True)
def _stamp_coverage_jit(px, py, depth, height, width, offsets):
    out = np.zeros(height * width, dtype=np.bool_)
    for i in range(px.shape[0]):
        if not depth[i] > 0:
            continue
        cx = px[i]
        cy = py[i]
        if cx < 0 or cx >= width or cy < 0 or cy >= height:
            continue
        for k in range(offsets.shape[0]):
            x = cx + offsets[k, 0]
            y = cy + offsets[k, 1]
            if 0 <= x < width and 0 <= y < height:
                out[y * width + x] = True
    return out.reshape(height, width)


def stamp_coverage_numba(px, py, depth, height, width, offsets):
    return _stamp_coverage_jit(
        np.ascontiguousarray(px, dtype=np.int64),
        np.ascontiguousarray(py, dtype=np.int64),
        np.ascontiguousarray(depth, dtype=np.float64),
        int(height),
        int(width),
        np.ascontiguousarray(offsets, dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# farthest point sampling


def fps_numpy(points, first, m):
    n = points.shape[0]
    out = np.empty(m, dtype=np.int64)
    if m == 0:
        return out
    dist = np.full(n, np.inf)
    cur = int(first)
    for i in range(m):
        out[i] = cur
        d = ((points - points[cur]) ** 2).sum(axis=1)
        np.minimum(dist, d, out=dist)
        # selected points sit below every unselected one, so duplicates never repeat
        dist[cur] = -1.0
        cur = int(np.argmax(dist))
    return out


@njit(cache=True)
def _fps_jit(points, first, m):
    n = points.shape[0]
    dim = points.shape[1]
    out = np.empty(m, dtype=np.int64)
    dist = np.full(n, np.inf)
    cur = first
    for i in range(m):
        out[i] = cur
        dist[cur] = -1.0
        best = -2.0
        nxt = 0
        for j in range(n):
            d = 0.0
            for c in range(dim):
                t = points[j, c] - points[cur, c]
                d += t * t
            if d < dist[j]:
                dist[j] = d
            if dist[j] > best:
                best = dist[j]
                nxt = j
        cur = nxt
    return out


def fps_numba(points, first, m):
    return _fps_jit(np.ascontiguousarray(points, dtype=np.float64), int(first), int(m))


# ---------------------------------------------------------------------------
# follow-stage sequential assignment


def follow_assign_numpy(feats, centers, counts, tau):
    """Assign rows of ``feats`` in order; running-mean update after each.

    Returns ``(labels, centers, counts)`` where the returned arrays include
    any clusters founded during the pass.
    """
    n, dim = feats.shape
    cap = centers.shape[0] + n
    c = np.zeros((cap, dim))
    c[: centers.shape[0]] = centers
    cnt = np.zeros(cap, dtype=np.int64)
    cnt[: centers.shape[0]] = counts
    k = centers.shape[0]
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        f = feats[i]
        if k > 0:
            d2 = ((c[:k] - f) ** 2).sum(axis=1)
            j = int(np.argmin(d2))
            if np.sqrt(d2[j]) < tau:
                labels[i] = j
                c[j] = (c[j] * cnt[j] + f) / (cnt[j] + 1)
                cnt[j] += 1
                continue
        c[k] = f
        cnt[k] = 1
        labels[i] = k
        k += 1
    return labels, c[:k].copy(), cnt[:k].copy()


@njit(cache=True)
def _follow_assign_jit(feats, centers, counts, tau):
    n = feats.shape[0]
    dim = feats.shape[1]
    k0 = centers.shape[0]
    cap = k0 + n
    c = np.zeros((cap, dim))
    cnt = np.zeros(cap, dtype=np.int64)
    for a in range(k0):
        cnt[a] = counts[a]
        for b in range(dim):
            c[a, b] = centers[a, b]
    k = k0
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        best = np.inf
        j = -1
        for a in range(k):
            d = 0.0
            for b in range(dim):
                t = c[a, b] - feats[i, b]
                d += t * t
            if d < best:
                best = d
                j = a
        if j >= 0 and np.sqrt(best) < tau:
            labels[i] = j
            w = cnt[j]
            for b in range(dim):
                c[j, b] = (c[j, b] * w + feats[i, b]) / (w + 1)
            cnt[j] = w + 1
        else:
            for b in range(dim):
                c[k, b] = feats[i, b]
            cnt[k] = 1
            labels[i] = k
            k += 1
    return labels, c[:k].copy(), cnt[:k].copy()


def follow_assign_numba(feats, centers, counts, tau):
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, feats.shape[1])
    return _follow_assign_jit(
        np.ascontiguousarray(feats, dtype=np.float64),
        np.ascontiguousarray(centers),
        np.ascontiguousarray(counts, dtype=np.int64),
        float(tau),
    )


if BACKEND == "numba":
    rasterize_nearest = rasterize_nearest_numba
    stamp_coverage = stamp_coverage_numba
    fps = fps_numba
    follow_assign_kernel = follow_assign_numba
else:
    rasterize_nearest = rasterize_nearest_numpy
    stamp_coverage = stamp_coverage_numpy
    fps = fps_numpy
    follow_assign_kernel = follow_assign_numpy
