"""End-to-end fusion and the no-reference quality report."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as E
from .adaptation import AdaptationConfig, AdaptationResult, target_adapt
from .coregistration import CoregistrationProduct, estimate_band_shifts
from .errors import ContractViolation
from .loss import LossConfig, LossTargets, spatial_loss
from .metrics import MetricConfig, ergas_t, q2n_t
from .model import ModelWeights, forward
from .raster import SensorSpec, upsample_poly23


def quality_report(fused, pan, ms, spec: SensorSpec, product: CoregistrationProduct,
                   metric_cfg: MetricConfig | None = None) -> dict:
    """No-reference indices of a full-resolution fused image.

    ``d_lambda_align`` and ``r_ergas`` compare the MS image with the fused
    product re-shifted by the estimated band offsets, MTF-filtered and
    decimated; ``d_lambda`` does the same without the shifts. ``d_rho`` is
    the spatial distortion against the reference correlation field.
    """
    metric_cfg = metric_cfg or MetricConfig(ratio=spec.ratio)
    fused = np.asarray(getattr(fused, "values", fused), dtype=np.float64)
    pan = np.asarray(getattr(pan, "values", pan), dtype=np.float64)
    ms = np.asarray(getattr(ms, "values", ms), dtype=np.float64)
    if fused.shape[1:] != pan.shape or fused.shape[0] != ms.shape[0]:
        raise ContractViolation(f"fused image {fused.shape} does not match PAN {pan.shape} / MS {ms.shape}")
    if ms.shape[1] * spec.ratio != pan.shape[0] or ms.shape[2] * spec.ratio != pan.shape[1]:
        raise ContractViolation(f"MS {ms.shape[1:]} x ratio {spec.ratio} does not match PAN {pan.shape}")
    base = dict(gamma=0.0, beta=1.0, sigma=metric_cfg.sigma, q2n_window=metric_cfg.window,
                q2n_stride=metric_cfg.stride, eps=metric_cfg.eps)
    ft = E.constant(fused[None])
    aligned = LossTargets.from_product(pan, ms, product, spec, LossConfig(align=True, **base))
    red = aligned.reduce(ft)
    plain = LossTargets.from_product(pan, ms, product, spec, LossConfig(align=False, **base))
    red0 = plain.reduce(ft)
    spatial, active = spatial_loss(ft, aligned)
    per_band = []
    for b in range(ms.shape[0]):
        sl = slice(b, b + 1)
        per_band.append({
            "band": b,
            "shift": [float(v) for v in product.alignment[b]],
            "r_ergas": ergas_t(E.crop(red, channels=sl), E.crop(aligned.ms, channels=sl), spec.ratio).item(),
        })
    return {
        "d_lambda_align": 1.0 - q2n_t(red, aligned.ms, aligned.metric_cfg).item(),
        "r_ergas": ergas_t(red, aligned.ms, spec.ratio).item(),
        "d_lambda": 1.0 - q2n_t(red0, plain.ms, plain.metric_cfg).item(),
        "d_rho": spatial.item(),
        "d_rho_active_fraction": active,
        "per_band": per_band,
    }


@dataclass
class FusionResult:
    fused: np.ndarray
    report: dict
    product: CoregistrationProduct
    adaptation: AdaptationResult | None = None


def pansharpen(weights: ModelWeights, pan, ms, spec: SensorSpec, adapt_cfg: AdaptationConfig | None = None,
               loss_cfg: LossConfig = LossConfig(), metric_cfg: MetricConfig | None = None,
               fast: bool = True, timing: bool = True, product: CoregistrationProduct | None = None,
               callback=None) -> FusionResult:
    """Optionally adapt ``weights`` to the target pair, then fuse and score it.

    Adaptation runs when ``adapt_cfg.iterations > 0``: on selected tiles when
    ``fast`` is set and the image holds enough tiles, else on the whole image.
    """
    from .tiles import select_tiles

    pan_v = np.asarray(getattr(pan, "values", pan), dtype=np.float64)
    ms_v = np.asarray(getattr(ms, "values", ms), dtype=np.float64)
    if weights.bands != ms_v.shape[0]:
        raise ContractViolation(f"weights expect {weights.bands} bands, MS image has {ms_v.shape[0]}")
    up = upsample_poly23(ms_v, spec.ratio)
    if product is None:
        product = estimate_band_shifts(pan_v, ms_v, spec, ms_up=up, align=loss_cfg.align)
    result = None
    if adapt_cfg is not None and adapt_cfg.iterations > 0:
        tiles = None
        h, w = pan_v.shape
        if fast and (h // adapt_cfg.tile_size) * (w // adapt_cfg.tile_size) > adapt_cfg.n_clusters:
            tiles = select_tiles(pan_v, up, spec, adapt_cfg)
        result = target_adapt(weights, pan_v, ms_v, product, spec, adapt_cfg, loss_cfg, tiles=tiles,
                              timing=timing, callback=callback, ms_up=up)
        weights = result.weights
    fused = forward(weights, pan_v, up)
    return FusionResult(fused, quality_report(fused, pan_v, ms_v, spec, product, metric_cfg), product, result)
