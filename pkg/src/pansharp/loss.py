"""Training objective: alignment-aware spectral term plus correlation-based spatial term."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import engine as E
from .coregistration import CoregistrationProduct
from .engine import Tensor
from .errors import ContractViolation, NumericFailure
from .metrics import EPS, MetricConfig, d_rho_t, ergas_t, q2n_t
from .raster import SensorSpec, SeparableFilter, gaussian_kernel_1d


@dataclass(frozen=True)
class LossConfig:
    gamma: float = 0.05
    beta: float = 1.0
    sigma: int | None = None
    align: bool = True
    variant: str = "jesse"
    q2n_window: int = 32
    q2n_stride: int = 32
    eps: float = EPS

    def __post_init__(self):
        if self.variant not in ("jesse", "zpnn"):
            raise ContractViolation(f"unknown spectral loss variant {self.variant!r}")
        if self.gamma < 0 or self.beta < 0:
            raise ContractViolation("loss weights must be non-negative")


@dataclass
class LossBreakdown:
    total: float
    spectral_dlambda: float
    spectral_ergas: float
    spatial: float
    active_fraction: float
    spectral_l1: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


class LossTargets:
    """Everything the loss needs about one sample, prepared once.

    ``pan`` is ``(H, W)``, ``ms`` is ``(B, H/R, W/R)``, ``rho_max`` and
    ``rho_mask`` are full-size ``(B, H, W)`` arrays in PAN geometry, and
    ``alignment`` holds per-band ``(dx, dy)``.
    """

    def __init__(self, pan, ms, rho_max, rho_mask, alignment, spec: SensorSpec, cfg: LossConfig):
        self.spec, self.cfg = spec, cfg
        r = spec.ratio
        pan = np.asarray(pan, dtype=np.float64)
        ms = np.asarray(ms, dtype=np.float64)
        h, w = pan.shape
        if ms.shape[1] * r != h or ms.shape[2] * r != w:
            raise ContractViolation(f"MS {ms.shape[1:]} does not match PAN {pan.shape} at ratio {r}")
        self.bands = ms.shape[0]
        self.height, self.width = h, w
        self.sigma = cfg.sigma if cfg.sigma is not None else r
        self.pan = E.constant(pan[None, None])
        self.alignment = (np.asarray(alignment, dtype=np.float64) if cfg.align
                          else np.zeros((self.bands, 2)))
        self.filter = SeparableFilter(spec.ms_mtf_gains, r)
        self.ms_rows, self.ms_cols = self._spectral_window(h // r, w // r)
        self.ms = E.constant(ms[None][:, :, self.ms_rows, self.ms_cols])
        s = self.sigma
        rows, cols = slice(s // 2, s // 2 + h - s + 1), slice(s // 2, s // 2 + w - s + 1)
        self.rho_max = np.asarray(rho_max)[:, rows, cols]
        self.rho_mask = np.asarray(rho_mask, dtype=bool)[:, rows, cols]
        self.metric_cfg = MetricConfig(ratio=r, window=cfg.q2n_window, stride=cfg.q2n_stride, eps=cfg.eps)

    @classmethod
    def from_product(cls, pan, ms, product: CoregistrationProduct, spec: SensorSpec, cfg: LossConfig,
                     rows: slice | None = None, cols: slice | None = None):
        """Targets for the PAN-geometry crop ``(rows, cols)`` of full-image products."""
        pan = np.asarray(getattr(pan, "values", pan))
        ms = np.asarray(getattr(ms, "values", ms))
        rho, mask = product.rho_max.values, product.rho_max.mask
        if rows is not None or cols is not None:
            r = spec.ratio
            rows, cols = rows or slice(0, pan.shape[0]), cols or slice(0, pan.shape[1])
            if rows.start % r or cols.start % r:
                raise ContractViolation("tile anchors must be multiples of the ratio")
            ms = ms[:, rows.start // r:rows.stop // r, cols.start // r:cols.stop // r]
            pan, rho, mask = pan[rows, cols], rho[:, rows, cols], mask[:, rows, cols]
        return cls(pan, ms, rho, mask, product.alignment, spec, cfg)

    def _spectral_window(self, hm: int, wm: int) -> tuple[slice, slice]:
        # MS samples whose filter footprint (after the alignment shift) avoids clamped PAN pixels
        r = self.spec.ratio
        half = max(len(gaussian_kernel_1d(g, r)) for g in self.spec.ms_mtf_gains) // 2
        dx = np.abs(self.alignment[:, 0]).max(initial=0.0)
        dy = np.abs(self.alignment[:, 1]).max(initial=0.0)

        def span(n, d):
            if d == 0:
                return slice(0, n)
            reach = int(np.ceil(d)) + half
            lo = max(0, int(np.ceil((reach - r // 2) / r)))
            hi = min(n, (r * n - 1 - reach - r // 2) // r + 1)
            if hi - lo < 1:
                raise ContractViolation("image too small for the shift-safe spectral region")
            return slice(lo, hi)

        return span(hm, dy), span(wm, dx)

    def reduce(self, fused: Tensor) -> Tensor:
        """Align (if configured), MTF-filter and decimate the fused image, then crop."""
        x = fused
        if np.any(self.alignment):
            parts = []
            for b, (dx, dy) in enumerate(self.alignment):
                ch = E.crop(x, channels=slice(b, b + 1))
                parts.append(E.spatial_shift(ch, dx, dy) if (dx or dy) else ch)
            x = E.concat_channels(parts)
        x = self.filter.downscale(x)
        return E.crop(x, rows=self.ms_rows, cols=self.ms_cols)


def spectral_loss(fused: Tensor, targets: LossTargets) -> tuple[Tensor, Tensor, Tensor]:
    """``(d_lambda + gamma * ergas, d_lambda, ergas)`` on the aligned, reduced fused image."""
    reduced = targets.reduce(fused)
    dl = 1.0 - q2n_t(reduced, targets.ms, targets.metric_cfg)
    er = ergas_t(reduced, targets.ms, targets.spec.ratio)
    return dl + targets.cfg.gamma * er, dl, er


def zpnn_spectral_loss(fused: Tensor, targets: LossTargets) -> Tensor:
    """Mean absolute error between the reduced fused image (no alignment) and the MS image."""
    reduced = E.crop(targets.filter.downscale(fused), rows=targets.ms_rows, cols=targets.ms_cols)
    return E.mean(E.abs_(reduced - targets.ms))


def spatial_loss(fused: Tensor, targets: LossTargets) -> tuple[Tensor, float]:
    return d_rho_t(fused, targets.pan, targets.rho_max, targets.rho_mask, targets.sigma, targets.cfg.eps)


def total_loss(fused: Tensor, targets: LossTargets) -> tuple[Tensor, LossBreakdown]:
    cfg = targets.cfg
    if fused.shape != (1, targets.bands, targets.height, targets.width):
        raise ContractViolation(f"fused tensor {fused.shape} does not match targets "
                                f"({targets.bands}, {targets.height}, {targets.width})")
    spatial, active = spatial_loss(fused, targets)
    if cfg.variant == "zpnn":
        l1 = zpnn_spectral_loss(fused, targets)
        total = l1 + cfg.beta * spatial
        if not np.isfinite(total.item()):
            raise NumericFailure("non-finite loss")
        return total, LossBreakdown(total.item(), 0.0, 0.0, spatial.item(), active, l1.item())
    spec_term, dl, er = spectral_loss(fused, targets)
    total = spec_term + cfg.beta * spatial
    parts = {"d_lambda": dl.item(), "ergas": er.item(), "spatial": spatial.item()}
    bad = [k for k, v in parts.items() if not np.isfinite(v)]
    if bad:
        raise NumericFailure(f"non-finite loss terms: {', '.join(bad)}")
    return total, LossBreakdown(total.item(), parts["d_lambda"], parts["ergas"], parts["spatial"], active)
