"""Choosing a few representative tiles for fast adaptation.

Each candidate tile gets a hand-crafted descriptor; descriptors are
standardised, projected on their top three principal axes and clustered
with k-means; the medoid tile of each cluster is kept.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .adaptation import AdaptationConfig, tile_anchors
from .errors import ContractViolation
from .metrics import local_correlation_field
from .raster import SensorSpec

HIST_BINS = 16


def feature_length(bands: int) -> int:
    """``2B`` band mean/std, 2 gradient stats, 16 histogram bins, ``B`` correlations."""
    return 3 * bands + 2 + HIST_BINS


def extract_tile_features(pan_tile, ms_up_tile, scale: float = 2047.0, value_range=None,
                          ratio: int = 4) -> np.ndarray:
    """Fixed-length descriptor of a PAN / upsampled-MS tile pair.

    Intensities are divided by ``scale``; the histogram spans
    ``value_range`` (default ``(0, scale)``) and sums to one.
    """
    pan = np.asarray(pan_tile, dtype=np.float64)
    ms = np.asarray(ms_up_tile, dtype=np.float64)
    if ms.ndim != 3 or ms.shape[1:] != pan.shape:
        raise ContractViolation(f"tile shapes PAN {pan.shape} / MS {ms.shape} do not match")
    lo, hi = value_range if value_range is not None else (0.0, scale)
    band_mean = ms.mean(axis=(1, 2)) / scale
    band_std = ms.std(axis=(1, 2)) / scale
    gy = np.diff(pan, axis=0)[:, :-1]
    gx = np.diff(pan, axis=1)[:-1, :]
    grad = np.hypot(gx, gy) / scale
    hist, _ = np.histogram(np.clip(pan, lo, hi), bins=HIST_BINS, range=(lo, hi if hi > lo else lo + 1.0))
    hist = hist / pan.size
    sigma = min(ratio, *pan.shape)
    if sigma >= 2:
        field = local_correlation_field(pan, ms, sigma)
        corr = np.nan_to_num(field.mean(), nan=0.0)
    else:
        corr = np.zeros(ms.shape[0])
    return np.concatenate([band_mean, band_std, [grad.mean(), grad.std()], hist, corr])


@dataclass
class PCAResult:
    projections: np.ndarray
    basis: np.ndarray
    explained: np.ndarray
    mean: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return self.mean + self.projections @ self.basis


def pca3(features, rank_tol: float = 1e-12) -> PCAResult:
    """Project mean-centred vectors on the top three covariance eigenvectors.

    Each eigenvector's sign is chosen so its largest-magnitude entry is
    positive. Missing directions (rank < 3) are returned as zero components
    with a warning.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 4:
        raise ContractViolation(f"pca3 needs at least 4 feature vectors, got shape {x.shape}")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (x.shape[0] - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    total = vals.clip(min=0).sum()
    basis = np.zeros((3, x.shape[1]))
    explained = np.zeros(3)
    usable = int(np.sum(vals > rank_tol * max(vals[0], 1e-300))) if total > 0 else 0
    if usable < 3:
        warnings.warn(f"feature matrix has rank {usable} < 3; padding with zero components", RuntimeWarning)
    for k in range(min(3, usable, x.shape[1])):
        v = vecs[:, k]
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        basis[k] = v
        explained[k] = vals[k] / total
    return PCAResult(xc @ basis.T, basis, explained, mean)


@dataclass
class KMeansResult:
    labels: np.ndarray
    medoids: np.ndarray
    centroids: np.ndarray
    iterations: int


def _sq_dist(points, centers):
    return ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)


def _kmeans_pp(points, k, rng):
    n = len(points)
    chosen = [int(rng.integers(n))]
    d2 = _sq_dist(points, points[chosen])[:, 0]
    while len(chosen) < k:
        if d2.sum() <= 0:
            rest = [i for i in range(n) if i not in chosen]
            nxt = int(rng.choice(rest))
        else:
            nxt = int(rng.choice(n, p=d2 / d2.sum()))
        chosen.append(nxt)
        d2 = np.minimum(d2, _sq_dist(points, points[[nxt]])[:, 0])
    return points[chosen].copy()


def kmeans_medoids(points, k: int, seed: int = 0, tol: float = 1e-8, max_iter: int = 100) -> KMeansResult:
    """k-means++ seeding, Lloyd iterations, then the medoid of every cluster.

    An emptied cluster is re-seeded at the point farthest from its current
    centroid. The medoid minimises the summed Euclidean distance to the
    other members of its cluster; ties go to the lowest index.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if not 1 <= k <= n:
        raise ContractViolation(f"k must lie in [1, {n}], got {k}")
    if k == n:
        idx = np.arange(n)
        return KMeansResult(idx.copy(), idx, pts.copy(), 0)
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(pts, k, rng)
    labels = np.zeros(n, dtype=np.int64)
    it = 0
    for it in range(1, max_iter + 1):
        d = _sq_dist(pts, centers)
        labels = d.argmin(axis=1)
        new = centers.copy()
        for c in range(k):
            members = labels == c
            if members.any():
                new[c] = pts[members].mean(axis=0)
        for c in range(k):
            if not np.any(labels == c):
                own = d[np.arange(n), labels]
                far = int(np.argmax(own))
                new[c] = pts[far]
                labels[far] = c
        shift = np.sqrt(((new - centers) ** 2).sum(axis=1)).max()
        centers = new
        if shift < tol:
            break
    labels = _sq_dist(pts, centers).argmin(axis=1)
    medoids = np.empty(k, dtype=np.int64)
    for c in range(k):
        members = np.flatnonzero(labels == c)
        if members.size == 0:
            far = int(np.argmax(_sq_dist(pts, centers[[c]])[:, 0]))
            members = np.array([far])
            labels[far] = c
        sub = pts[members]
        cost = np.sqrt(_sq_dist(sub, sub)).sum(axis=1)
        medoids[c] = members[int(np.argmin(cost))]
    return KMeansResult(labels, medoids, centers, it)


@dataclass
class TileSet:
    """Selected tiles: ``anchors[i] = (row, col)`` of a ``size`` x ``size`` block."""

    anchors: list
    size: int
    cluster_ids: list
    features: np.ndarray
    candidates: list
    projections: np.ndarray
    explained: np.ndarray

    def to_dict(self) -> dict:
        return {"tile_size": self.size, "n_candidates": len(self.candidates),
                "explained_variance": [float(v) for v in self.explained],
                "tiles": [{"row": int(r), "col": int(c), "size": self.size, "cluster": int(k)}
                          for (r, c), k in zip(self.anchors, self.cluster_ids)]}


def select_tiles(pan, ms_up, spec: SensorSpec, cfg: AdaptationConfig = AdaptationConfig(),
                 scale: float | None = None) -> TileSet:
    pan = np.asarray(getattr(pan, "values", pan), dtype=np.float64)
    ms_up = np.asarray(getattr(ms_up, "values", ms_up), dtype=np.float64)
    c, k = cfg.tile_size, cfg.n_clusters
    if c % spec.ratio:
        raise ContractViolation(f"tile size {c} must be a multiple of the ratio {spec.ratio}")
    anchors = tile_anchors(pan.shape[0], pan.shape[1], c)
    if len(anchors) < k:
        if cfg.strict_tiles:
            raise ContractViolation(f"only {len(anchors)} tiles of {c} px available, {k} requested")
        warnings.warn(f"only {len(anchors)} tiles available; reducing cluster count from {k}", RuntimeWarning)
        k = len(anchors)
    scale = scale or float(max(pan.max(), 1.0))
    vrange = (float(pan.min()), float(pan.max()))
    feats = np.stack([extract_tile_features(pan[r:r + c, q:q + c], ms_up[:, r:r + c, q:q + c], scale, vrange,
                                            spec.ratio) for r, q in anchors])
    std = feats.std(axis=0)
    z = np.where(std > 0, (feats - feats.mean(axis=0)) / np.where(std > 0, std, 1.0), 0.0)
    if len(anchors) >= 4:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            pca = pca3(z)
        proj, explained = pca.projections, pca.explained
    else:
        proj, explained = z, np.zeros(3)
    km = kmeans_medoids(proj, k, seed=cfg.seed)
    picked = sorted(range(k), key=lambda j: km.medoids[j])
    return TileSet(anchors=[anchors[km.medoids[j]] for j in picked], size=c, cluster_ids=picked,
                   features=feats[[km.medoids[j] for j in picked]], candidates=anchors, projections=proj,
                   explained=explained)
