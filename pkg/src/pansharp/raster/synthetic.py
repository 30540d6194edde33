"""Seeded synthetic scenes with known per-band misregistration."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from ..errors import ContractViolation
from .filters import MAX_SHIFT, SeparableFilter, gaussian_sigma, shift_subpixel
from .. import engine as E
from .types import MultispectralRaster, PanRaster, SensorSpec

CLASSES = ("vegetation", "water", "soil", "urban")
RANGE = (0.0, 2047.0)


@dataclass
class SceneRecord:
    seed: int
    size: int
    bands: int
    ratio: int
    layout: str
    band_shifts: list
    pan_weights: list
    class_map: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "size": self.size, "bands": self.bands, "ratio": self.ratio,
                "layout": self.layout, "band_shifts": [list(map(float, s)) for s in self.band_shifts],
                "pan_weights": [float(w) for w in self.pan_weights]}


def _signatures(bands: int) -> np.ndarray:
    lam = np.linspace(0.45, 0.9, bands) if bands > 1 else np.array([0.65])
    t = (lam - 0.45) / 0.45
    veg = 180.0 + 850.0 / (1.0 + np.exp(-(lam - 0.7) / 0.02)) + 60.0 * np.exp(-((lam - 0.55) / 0.03) ** 2)
    water = 320.0 - 260.0 * t
    soil = 350.0 + 550.0 * t
    urban = 750.0 + 120.0 * np.sin(6.0 * t)
    return np.stack([veg, water, soil, urban])


def _noise(rng, shape, scale) -> np.ndarray:
    n = ndimage.gaussian_filter(rng.standard_normal(shape), scale, mode="wrap")
    return n / (n.std() + 1e-12)


def _blocks(rng, shape, block) -> np.ndarray:
    h, w = shape
    coarse = rng.standard_normal((h // block + 1, w // block + 1))
    return np.repeat(np.repeat(coarse, block, axis=0), block, axis=1)[:h, :w]


def _class_map(rng, n: int, layout: str) -> np.ndarray:
    if layout == "quadrants":
        cm = np.empty((n, n), dtype=np.int64)
        half = n // 2
        cm[:half, :half], cm[:half, half:], cm[half:, :half], cm[half:, half:] = 0, 1, 2, 3
        return cm
    if layout != "mosaic":
        raise ContractViolation(f"unknown scene layout {layout!r}")
    cells = max(8, (n // 96) ** 2)
    pts = rng.uniform(0, n, size=(cells, 2))
    labels = rng.integers(0, len(CLASSES), size=cells)
    yy, xx = np.mgrid[0:n, 0:n]
    _, idx = cKDTree(pts).query(np.column_stack([yy.ravel(), xx.ravel()]))
    return labels[idx].reshape(n, n)


def _roads(rng, n: int, count: int) -> np.ndarray:
    mask = np.zeros((n, n), dtype=bool)
    yy, xx = np.mgrid[0:n, 0:n]
    for _ in range(count):
        theta = rng.uniform(0, math.pi)
        c = rng.uniform(0.2 * n, 0.8 * n, size=2)
        d = np.abs((yy - c[0]) * math.cos(theta) - (xx - c[1]) * math.sin(theta))
        mask |= d < 1.5
    return mask


def make_synthetic_scene(seed: int, size: int, bands: int = 4, spec: SensorSpec | None = None,
                         band_shifts=None, layout: str = "mosaic"):
    """Build ``(ground_truth, pan, ms, record)`` for a seeded scene.

    Band ``b`` of the MS image is the MTF-filtered, decimated ground truth
    sampled at ``(row + dy_b, col + dx_b)``, so a registration estimator
    should return ``(dx_b, dy_b)`` for that band.
    """
    spec = spec or SensorSpec.default(bands)
    if spec.bands != bands:
        raise ContractViolation(f"sensor spec has {spec.bands} gains for {bands} bands")
    r = spec.ratio
    if size % r or size < 4 * r:
        raise ContractViolation(f"scene size {size} must be a multiple of the ratio {r} and at least {4 * r}")
    shifts = [(0.0, 0.0)] * bands if band_shifts is None else [tuple(map(float, s)) for s in band_shifts]
    if len(shifts) != bands:
        raise ContractViolation(f"{len(shifts)} band shifts for {bands} bands")
    for s in shifts:
        if max(abs(s[0]), abs(s[1])) > MAX_SHIFT:
            raise ContractViolation(f"band shift {s} outside +/-{MAX_SHIFT}")

    rng = np.random.default_rng(seed)
    reach = MAX_SHIFT + 4.0 * max(gaussian_sigma(g, r) for g in spec.ms_mtf_gains) + 1
    margin = r * int(math.ceil(reach / r))
    n = size + 2 * margin

    cm = _class_map(rng, n, layout)
    sig = _signatures(bands)
    tex_common = {
        0: 0.18 * _noise(rng, (n, n), 3.0) + 0.10 * _noise(rng, (n, n), 1.0),
        1: 0.04 * _noise(rng, (n, n), 6.0),
        2: 0.12 * _noise(rng, (n, n), 2.0) + 0.06 * _noise(rng, (n, n), 8.0),
        3: 0.30 * _blocks(rng, (n, n), 8) + 0.05 * _noise(rng, (n, n), 1.0),
    }
    band_tex = [0.05 * _noise(rng, (n, n), 2.0) for _ in range(bands)]
    roads = _roads(rng, n, 3 if layout == "mosaic" else 0)

    hr = np.empty((bands, n, n))
    for b in range(bands):
        tex = np.zeros((n, n))
        base = np.zeros((n, n))
        for k in range(len(CLASSES)):
            sel = cm == k
            base[sel] = sig[k, b]
            tex[sel] = tex_common[k][sel]
        hr[b] = base * (1.0 + tex + band_tex[b])
        hr[b][roads] = 0.55 * sig[3, b]
    hr = np.clip(hr, 1.0, RANGE[1])

    weights = rng.dirichlet(np.full(bands, 4.0))
    pan_full = np.tensordot(weights, hr, axes=1)
    pan_full = pan_full + 0.004 * pan_full.mean() * _noise(rng, (n, n), 0.7)
    pan_full = np.clip(pan_full, 1.0, RANGE[1])

    shifted = np.empty_like(hr)
    for b, (dx, dy) in enumerate(shifts):
        shifted[b] = shift_subpixel(hr[b], (dx, dy))[0]
    filt = SeparableFilter(spec.ms_mtf_gains, r).filter(E.constant(shifted[None])).values[0]
    off = r // 2
    inner = slice(margin, margin + size)
    ms = filt[:, inner, inner][:, off::r, off::r]

    gt = MultispectralRaster(hr[:, inner, inner], RANGE)
    pan = PanRaster(pan_full[inner, inner], RANGE)
    record = SceneRecord(seed=seed, size=size, bands=bands, ratio=r, layout=layout, band_shifts=shifts,
                         pan_weights=list(weights), class_map=cm[inner, inner])
    return gt, pan, MultispectralRaster(ms, RANGE), record
