"""Instance-feature field: mask smoothing / contrastive losses, their analytic
gradients, a gradient-descent trainer and gradient-stability point selection.

Rendering uses the nearest-point-wins projector, so every covered pixel maps
to exactly one point and pixel gradients scatter straight back to points.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, DivergenceError
from .model import ScenePoints, ViewBundle
from .projection import DEFAULT_RADIUS, render_index_map

logger = logging.getLogger(__name__)

EPS_DIV = 1e-6


@dataclass(frozen=True)
class RenderedFeatureMap:
    grid: np.ndarray  # H x W x d
    coverage: np.ndarray  # H x W bool

    @classmethod
    def from_index_map(cls, features: np.ndarray, index_map: np.ndarray) -> "RenderedFeatureMap":
        cov = index_map >= 0
        grid = np.zeros(index_map.shape + (features.shape[1],))
        grid[cov] = features[index_map[cov]]
        return cls(grid, cov)


@dataclass(frozen=True)
class OptConfig:
    """Trainer settings. ``lr=None`` picks a constant step from the pixel
    weights (half the inverse of the largest per-point smoothing curvature)."""

    lr: float | None = None
    iterations: int = 200
    lambda_s: float = 1.0
    lambda_c: float = 0.1
    eps_div: float = EPS_DIV
    radius: int = DEFAULT_RADIUS
    window_fraction: float = 0.25
    init: str = "scene"  # "scene" keeps stored features, "random" re-draws them
    seed: int = 0
    instance_dim: int | None = None

    def __post_init__(self):
        if self.lr is not None and self.lr < 0:
            raise ConfigError("train.lr must be >= 0")
        if self.iterations < 1:
            raise ConfigError("train.iterations must be >= 1")
        if self.lambda_s < 0 or self.lambda_c < 0:
            raise ConfigError("train.lambda_s / lambda_c must be >= 0")
        if not self.eps_div > 0:
            raise ConfigError("train.eps_div must be > 0")
        if not 0.0 < self.window_fraction <= 1.0:
            raise ConfigError("train.window_fraction must be in (0, 1]")
        if self.init not in ("scene", "random"):
            raise ConfigError("train.init must be 'scene' or 'random'")
        if self.radius < 0:
            raise ConfigError("train.radius must be >= 0")


@dataclass
class GradientTrace:
    """Per-point gradient norms for iterations k1+1..k2 (rows = iterations)."""

    k1: int
    k2: int
    norms: np.ndarray = field(repr=False)
    _filled: int = 0

    @classmethod
    def empty(cls, k1: int, k2: int, n_points: int) -> "GradientTrace":
        return cls(k1, k2, np.zeros((k2 - k1, n_points)))

    @property
    def window(self) -> int:
        return self.k2 - self.k1

    @property
    def complete(self) -> bool:
        return self._filled >= self.window

    def record(self, iteration: int, grad_norms: np.ndarray) -> None:
        """``iteration`` is 1-based; only k1 < iteration <= k2 is kept."""
        if self.k1 < iteration <= self.k2:
            self.norms[(iteration - self.k1 - 1) % self.window] = grad_norms
            self._filled += 1


def select_stable_points(trace: GradientTrace, epsilon: float) -> np.ndarray:
    """Indices whose mean gradient norm over the window is below ``epsilon``."""
    mean = trace.norms.sum(axis=0) / trace.window
    return np.nonzero(mean < epsilon)[0]


# ---------------------------------------------------------------------------
# per-view loss core on a flat list of masked pixels


@dataclass(frozen=True)
class _PixelTerms:
    point: np.ndarray  # point index per pixel (or pixel id for map inputs)
    mask: np.ndarray  # compact mask index per pixel, 0..m-1
    conf: np.ndarray  # per-pixel confidence
    mask_conf: np.ndarray  # per-mask confidence, length m

    @property
    def m(self) -> int:
        return int(self.mask_conf.size)


def _pixel_terms(index_map: np.ndarray, bundle: ViewBundle) -> _PixelTerms:
    seg = bundle.full_segmentation
    if seg.shape != index_map.shape:
        raise ValueError(f"map shape {index_map.shape} != segmentation shape {seg.shape}")
    sel = (index_map >= 0) & (seg >= 0)
    raw = seg[sel]
    ids, compact = np.unique(raw, return_inverse=True)
    conf = bundle.pixel_confidence()[sel]
    mask_conf = np.array([bundle.mask_confidences.get(int(i), 1.0) for i in ids], dtype=np.float64)
    return _PixelTerms(index_map[sel].astype(np.int64), compact.reshape(-1), conf, mask_conf)


def _means(values: np.ndarray, terms: _PixelTerms) -> tuple[np.ndarray, np.ndarray]:
    m = terms.m
    counts = np.bincount(terms.mask, minlength=m).astype(np.float64)
    sums = np.zeros((m, values.shape[1]))
    np.add.at(sums, terms.mask, values)
    return sums / counts[:, None], counts


def _intra(values: np.ndarray, terms: _PixelTerms, want_grad: bool):
    if terms.m == 0:
        return 0.0, (np.zeros_like(values) if want_grad else None)
    means, counts = _means(values, terms)
    dev = values - means[terms.mask]
    wdev = terms.conf[:, None] * dev
    loss = float((wdev * dev).sum())
    if not want_grad:
        return loss, None
    acc = np.zeros_like(means)
    np.add.at(acc, terms.mask, wdev)
    grad = 2.0 * wdev - 2.0 * (acc / counts[:, None])[terms.mask]
    return loss, grad


def _contrast(values: np.ndarray, terms: _PixelTerms, eps_div: float, want_grad: bool):
    m = terms.m
    if m < 2:
        return 0.0, (np.zeros_like(values) if want_grad else None)
    means, counts = _means(values, terms)
    diff = means[:, None, :] - means[None, :, :]
    d2 = (diff**2).sum(axis=2)
    a = terms.mask_conf[:, None] + terms.mask_conf[None, :]
    off = ~np.eye(m, dtype=bool)
    denom = np.maximum(d2, eps_div)
    scale = 1.0 / (m * (m + 1))
    loss = float(scale * (a[off] / (2.0 * denom[off])).sum())
    if not want_grad:
        return loss, None
    # d/dmean_i of both ordered terms (i, j) and (j, i); zero where the floor holds
    active = off & (d2 > eps_div)
    coef = np.where(active, -2.0 * a / np.where(active, d2, 1.0) ** 2, 0.0)
    gmean = scale * (coef[:, :, None] * diff).sum(axis=1)
    grad = (gmean / counts[:, None])[terms.mask]
    return loss, grad


# ---------------------------------------------------------------------------
# map-level API


def _map_terms(fmap: RenderedFeatureMap, bundle: ViewBundle) -> tuple[np.ndarray, _PixelTerms]:
    h, w = fmap.coverage.shape
    pix_ids = np.where(fmap.coverage, np.arange(h * w).reshape(h, w), -1)
    terms = _pixel_terms(pix_ids, bundle)
    values = fmap.grid.reshape(h * w, -1)[terms.point]
    return values, terms


def loss_intra(fmap: RenderedFeatureMap, bundle: ViewBundle) -> float:
    """Confidence-weighted squared deviation from each mask's mean feature."""
    values, terms = _map_terms(fmap, bundle)
    return _intra(values, terms, False)[0]


def loss_contrast(fmap: RenderedFeatureMap, bundle: ViewBundle, eps_div: float = EPS_DIV) -> float:
    """Inverse squared distance between mask means, confidence weighted."""
    values, terms = _map_terms(fmap, bundle)
    return _contrast(values, terms, eps_div, False)[0]


def _grid_grad(fmap: RenderedFeatureMap, terms: _PixelTerms, pixel_grad: np.ndarray) -> np.ndarray:
    h, w = fmap.coverage.shape
    out = np.zeros((h * w, fmap.grid.shape[2]))
    out[terms.point] = pixel_grad
    return out.reshape(fmap.grid.shape)


def loss_intra_grad(fmap: RenderedFeatureMap, bundle: ViewBundle) -> tuple[float, np.ndarray]:
    values, terms = _map_terms(fmap, bundle)
    loss, g = _intra(values, terms, True)
    return loss, _grid_grad(fmap, terms, g)


def loss_contrast_grad(fmap: RenderedFeatureMap, bundle: ViewBundle, eps_div: float = EPS_DIV):
    values, terms = _map_terms(fmap, bundle)
    loss, g = _contrast(values, terms, eps_div, True)
    return loss, _grid_grad(fmap, terms, g)


# ---------------------------------------------------------------------------
# point-level objective


class InstanceObjective:
    """Total loss over views as a function of the per-point feature matrix."""

    def __init__(
        self,
        positions: np.ndarray,
        bundles: Sequence[ViewBundle],
        radius: int = DEFAULT_RADIUS,
        lambda_s: float = 1.0,
        lambda_c: float = 0.1,
        eps_div: float = EPS_DIV,
        threads: int | None = None,
    ):
        self.n_points = int(len(positions))
        self.lambda_s = lambda_s
        self.lambda_c = lambda_c
        self.eps_div = eps_div
        self.threads = threads
        self.terms = [_pixel_terms(render_index_map(positions, b.camera, radius), b) for b in bundles]

    def pixel_weight(self) -> np.ndarray:
        """Sum of pixel confidences each point receives across views."""
        w = np.zeros(self.n_points)
        for t in self.terms:
            w += np.bincount(t.point, weights=t.conf, minlength=self.n_points)
        return w

    def _view(self, features: np.ndarray, t: _PixelTerms, want_grad: bool):
        values = features[t.point]
        ls, gs = _intra(values, t, want_grad)
        lc, gc = _contrast(values, t, self.eps_div, want_grad)
        if not want_grad:
            return ls, lc, None
        g = self.lambda_s * gs + self.lambda_c * gc
        out = np.zeros_like(features)
        np.add.at(out, t.point, g)
        return ls, lc, out

    def evaluate(self, features: np.ndarray, want_grad: bool = True):
        """Return (total, L_s, L_c, gradient-or-None)."""
        features = np.asarray(features, dtype=np.float64)
        if self.threads is not None and self.threads > 1 and len(self.terms) > 1:
            with ThreadPoolExecutor(self.threads) as pool:
                parts = list(pool.map(lambda t: self._view(features, t, want_grad), self.terms))
        else:
            parts = [self._view(features, t, want_grad) for t in self.terms]
        ls = sum(p[0] for p in parts)
        lc = sum(p[1] for p in parts)
        total = self.lambda_s * ls + self.lambda_c * lc
        grad = None
        if want_grad:
            grad = np.zeros_like(features)
            for p in parts:
                grad += p[2]
        return total, ls, lc, grad


@dataclass
class TrainResult:
    scene: ScenePoints
    trace: GradientTrace
    losses: np.ndarray  # rows: (total, L_s, L_c) for iterations 0..N (0 = initial)
    lr: float

    def non_increasing_fraction(self) -> float:
        tot = self.losses[:, 0]
        if tot.size < 2:
            return 1.0
        return float(np.mean(np.diff(tot) <= 1e-12 * np.maximum(1.0, np.abs(tot[:-1]))))


def train_instance_features(
    scene: ScenePoints,
    bundles: Sequence[ViewBundle],
    cfg: OptConfig = OptConfig(),
    threads: int | None = None,
) -> TrainResult:
    if not bundles:
        raise ConfigError("training needs at least one view bundle")
    dim = cfg.instance_dim or scene.instance_dim or 6
    if cfg.init == "random" or scene.instance_dim != dim:
        rng = np.random.default_rng(cfg.seed)
        feats = rng.normal(size=(scene.count, dim))
    else:
        feats = scene.instance_features.copy()
    obj = InstanceObjective(
        scene.positions, bundles, cfg.radius, cfg.lambda_s, cfg.lambda_c, cfg.eps_div, threads
    )
    lr = cfg.lr
    if lr is None:
        wmax = float(obj.pixel_weight().max(initial=0.0))
        lr = 0.5 / (2.0 * cfg.lambda_s * wmax) if wmax > 0 and cfg.lambda_s > 0 else 0.01
    n = cfg.iterations
    window = max(1, int(round(cfg.window_fraction * n)))
    trace = GradientTrace.empty(n - window, n, scene.count)
    losses = np.zeros((n + 1, 3))
    for it in range(n + 1):
        total, ls, lc, grad = obj.evaluate(feats, want_grad=it < n)
        if not (np.isfinite(total) and (grad is None or np.isfinite(grad).all())):
            raise DivergenceError(f"loss became non-finite at iteration {it}")
        losses[it] = total, ls, lc
        if it == n:
            break
        trace.record(it + 1, np.linalg.norm(grad, axis=1))
        if lr:
            feats = feats - lr * grad
        if it % 50 == 0:
            logger.debug("iter %d loss %.6g (Ls %.6g, Lc %.6g)", it, total, ls, lc)
    return TrainResult(scene.with_features(feats), trace, losses, lr)
