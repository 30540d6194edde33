"""Per-band sub-pixel alignment against the low-passed PAN and the reference correlation field."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import engine as E
from .errors import InsufficientSupport
from .metrics import EPS, CorrelationField, local_correlation_field
from .raster import MAX_SHIFT, SensorSpec, lowpass_pan, shift_subpixel, shift_valid_mask, upsample_poly23

GRID_STEP = 0.5


def shift_grid(limit: float = MAX_SHIFT, step: float = GRID_STEP) -> np.ndarray:
    n = int(round(2 * limit / step)) + 1
    return np.linspace(-limit, limit, n)


@dataclass
class CoregistrationProduct:
    """Estimated per-band shifts ``(dx, dy)`` and the reference correlation field."""

    alignment: np.ndarray
    rho_max: CorrelationField
    scores: np.ndarray
    grid: np.ndarray

    @property
    def bands(self) -> int:
        return self.alignment.shape[0]

    def zero_shift_scores(self) -> np.ndarray:
        c = len(self.grid) // 2
        return self.scores[:, c, c]

    def best_scores(self) -> np.ndarray:
        out = np.empty(self.bands)
        for b, (dx, dy) in enumerate(self.alignment):
            out[b] = self.scores[b, _grid_index(self.grid, dx), _grid_index(self.grid, dy)]
        return out

    def to_dict(self) -> dict:
        best, zero = self.best_scores(), self.zero_shift_scores()
        return {"bands": [{"band": b, "shift": [float(dx), float(dy)], "score": float(best[b]),
                           "zero_shift_score": float(zero[b])}
                          for b, (dx, dy) in enumerate(self.alignment)],
                "grid": [float(g) for g in self.grid], "rho_max_window": self.rho_max.sigma}

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def _grid_index(grid, v) -> int:
    return int(np.argmin(np.abs(grid - v)))


def _window_support(valid: np.ndarray, sigma: int) -> np.ndarray:
    """Valid-domain mask of windows lying entirely inside ``valid`` (2-D)."""
    rows, cols = valid.any(axis=1), valid.any(axis=0)
    if np.array_equal(valid, np.outer(rows, cols)):
        # rectangular masks (every shift mask) separate into row and column runs
        run = lambda v: np.convolve(v.astype(np.int64), np.ones(sigma, dtype=np.int64), "valid") == sigma
        return np.outer(run(rows), run(cols))
    frac = E.windowed_mean(E.constant(valid.astype(np.float64)), sigma).values[0, 0]
    return frac > 1.0 - 1e-9


def _moments(stack: np.ndarray, sigma: int) -> np.ndarray:
    return E.integral_box_mean(stack[None], sigma, sigma)[0]


def candidate_scores(pan_lp: np.ndarray, ms_up: np.ndarray, sigma: int, grid=None,
                     eps: float = EPS) -> np.ndarray:
    """Mean local correlation between ``shift(pan_lp, (dx, dy))`` and each band.

    Returns ``scores[b, ix, iy]`` for ``dx = grid[ix]``, ``dy = grid[iy]``.
    Only windows fully inside the valid region of the shifted PAN and with
    non-flat content contribute; candidates without support score NaN.
    """
    grid = shift_grid() if grid is None else np.asarray(grid)
    bands, h, w = ms_up.shape
    # correlations ignore offsets; centring keeps the summed-area tables small
    pan_lp = pan_lp - pan_lp.mean()
    ms_up = ms_up - ms_up.mean(axis=(1, 2), keepdims=True)
    m_mom = _moments(np.concatenate([ms_up, ms_up ** 2]), sigma)
    mu_m, var_m = m_mom[:bands], m_mom[bands:] - m_mom[:bands] ** 2
    scores = np.full((bands, len(grid), len(grid)), np.nan)
    for ix, dx in enumerate(grid):
        for iy, dy in enumerate(grid):
            ps, _ = shift_subpixel(pan_lp, (dx, dy))
            support = _window_support(shift_valid_mask(h, w, dx, dy), sigma)
            if not support.any():
                continue
            mom = _moments(np.concatenate([ps[None], ps[None] ** 2, ps[None] * ms_up]), sigma)
            mu_p, var_p = mom[0], mom[1] - mom[0] ** 2
            cov = mom[2:] - mu_p * mu_m
            ok = support & (var_p >= eps)
            for b in range(bands):
                okb = ok & (var_m[b] >= eps)
                if not okb.any():
                    continue
                den = np.sqrt(np.maximum(var_p * var_m[b], eps))
                scores[b, ix, iy] = np.clip(cov[b] / den, -1.0, 1.0)[okb].mean()
    return scores


def select_shifts(scores: np.ndarray, grid) -> np.ndarray:
    """Arg-max per band; ties go to the smallest shift norm, then lexicographic ``(dx, dy)``."""
    grid = np.asarray(grid)
    dx, dy = np.meshgrid(grid, grid, indexing="ij")
    dx, dy = dx.ravel(), dy.ravel()
    order = np.lexsort((dy, dx, dx ** 2 + dy ** 2))
    out = np.zeros((scores.shape[0], 2))
    for b in range(scores.shape[0]):
        flat = scores[b].ravel()
        if np.all(np.isnan(flat)):
            raise InsufficientSupport(f"band {b}: no valid correlation windows for any candidate shift")
        best, best_k = -np.inf, None
        for k in order:
            if not np.isnan(flat[k]) and flat[k] > best:
                best, best_k = flat[k], k
        out[b] = dx[best_k], dy[best_k]
    return out


def reference_correlation_field(pan, ms, spec: SensorSpec, shifts=None, ms_up=None,
                                eps: float = EPS) -> CorrelationField:
    """Local correlation (window ``ratio**2``) between low-passed PAN and the upsampled MS.

    With ``shifts`` each band ``b`` is first moved by ``-shifts[b]`` so the
    field lives in the PAN geometry; windows touching shift-invalid pixels
    are masked.
    """
    sigma = spec.ratio ** 2
    pan_arr = np.asarray(getattr(pan, "values", pan), dtype=np.float64)
    up = upsample_poly23(ms, spec.ratio) if ms_up is None else ms_up
    up = np.asarray(getattr(up, "values", up), dtype=np.float64)
    h, w = pan_arr.shape
    if h < sigma or w < sigma:
        raise InsufficientSupport(f"image {h}x{w} smaller than the {sigma}-pixel reference window")
    plp = lowpass_pan(pan_arr, spec)
    support = np.ones(up.shape, dtype=bool)
    if shifts is not None:
        up = up.copy()
        for b, (dx, dy) in enumerate(np.asarray(shifts, dtype=np.float64)):
            if dx or dy:
                up[b], support[b] = shift_subpixel(up[b], (-dx, -dy))
    field = local_correlation_field(plp, up, sigma, eps)
    if shifts is not None:
        s = sigma
        for b in range(up.shape[0]):
            if support[b].all():
                continue
            inner = _window_support(support[b], s)
            full = np.zeros((h, w), dtype=bool)
            full[s // 2:s // 2 + h - s + 1, s // 2:s // 2 + w - s + 1] = inner
            field.mask[b] &= full
            field.values[b][~field.mask[b]] = 0.0
    return field


def estimate_band_shifts(pan, ms, spec: SensorSpec, ms_up=None, align: bool = True,
                         eps: float = EPS) -> CoregistrationProduct:
    """Grid search of per-band shifts in ``[-3, 3]^2`` (step 0.5 px) and the matching reference field.

    With ``align=False`` the shifts are forced to zero (the scores are
    still computed over the whole grid for reporting).
    """
    sigma = spec.ratio ** 2
    pan_arr = np.asarray(getattr(pan, "values", pan), dtype=np.float64)
    h, w = pan_arr.shape
    need = sigma + 2 * int(np.ceil(MAX_SHIFT)) + 1
    if h < need or w < need:
        raise InsufficientSupport(f"image {h}x{w} too small for the shift search (needs {need} pixels)")
    up = upsample_poly23(ms, spec.ratio) if ms_up is None else ms_up
    up = np.asarray(getattr(up, "values", up), dtype=np.float64)
    grid = shift_grid()
    scores = candidate_scores(lowpass_pan(pan_arr, spec), up, sigma, grid, eps)
    alignment = select_shifts(scores, grid) if align else np.zeros((up.shape[0], 2))
    rho_max = reference_correlation_field(pan_arr, ms, spec, shifts=alignment, ms_up=up, eps=eps)
    return CoregistrationProduct(alignment=alignment, rho_max=rho_max, scores=scores, grid=grid)
