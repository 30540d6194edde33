"""Resampling filters: polynomial interpolation, MTF-matched decimation, sub-pixel shifts."""

from __future__ import annotations

import math

import numpy as np
from scipy import ndimage

from .. import engine as E
from ..errors import ContractViolation, UnsupportedConfiguration
from ..engine import Tensor
from .types import MultispectralRaster, PanRaster, SensorSpec

# Odd half of the symmetric 23-tap x2 interpolator; even taps are zero, centre is 1.
_HALF_TAPS = (0.61066818237, -0.145397186478, 0.043619155884, -0.010385513306,
              0.001615524292, -0.000120162964)

MAX_SHIFT = 3.0


def interpolator_taps() -> np.ndarray:
    taps = np.zeros(23)
    for k, v in enumerate(_HALF_TAPS):
        taps[11 + 2 * k + 1] = v
        taps[11 - 2 * k - 1] = v
    # the tabulated values are rounded; rescale so the interpolated phase has unit DC gain
    taps /= taps.sum()
    taps[11] = 1.0
    return taps


def _values(x):
    return x.values if isinstance(x, (MultispectralRaster, PanRaster)) else np.asarray(x)


def _upsample2_axis(arr: np.ndarray, axis: int, odd: bool) -> np.ndarray:
    # originals land on odd output indices in the first stage, even ones afterwards
    pad = [(0, 0)] * arr.ndim
    pad[axis] = (6, 6)
    xp = np.pad(arr, pad, mode="edge")
    shape = list(xp.shape)
    n = arr.shape[axis]
    shape[axis] = 2 * xp.shape[axis]
    z = np.zeros(shape, dtype=np.float64)
    sl = [slice(None)] * arr.ndim
    sl[axis] = slice(1 if odd else 0, None, 2)
    z[tuple(sl)] = xp
    y = ndimage.correlate1d(z, interpolator_taps(), axis=axis, mode="constant")
    sl[axis] = slice(12, 12 + 2 * n)
    return y[tuple(sl)]


def upsample_poly23(ms, ratio: int):
    """Interpolate each band by ``ratio`` (a power of two) with the 23-tap kernel.

    Original sample ``i`` lands at ``ratio * i + ratio // 2``, the same phase
    that :func:`mtf_downscale` decimates at.
    """
    ratio = int(ratio)
    if ratio < 2 or ratio & (ratio - 1):
        raise UnsupportedConfiguration(f"23-tap interpolation supports power-of-two ratios only, got {ratio}")
    arr = np.asarray(_values(ms), dtype=np.float64)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[None]
    stages = int(round(math.log2(ratio)))
    for s in range(stages):
        arr = _upsample2_axis(arr, 1, odd=s == 0)
        arr = _upsample2_axis(arr, 2, odd=s == 0)
    if squeeze:
        arr = arr[0]
    if isinstance(ms, MultispectralRaster):
        return MultispectralRaster(arr, ms.radiometric_range)
    return arr


def gaussian_sigma(gain: float, ratio: int) -> float:
    """Std (PAN pixels) of the Gaussian whose response at 1/(2*ratio) cycles/pixel equals ``gain``."""
    if not 0.0 < gain < 1.0:
        raise ContractViolation(f"MTF gain must lie in (0, 1), got {gain}")
    return ratio * math.sqrt(-2.0 * math.log(gain)) / math.pi


def gaussian_kernel_1d(gain: float, ratio: int) -> np.ndarray:
    """Normalised odd-length Gaussian taps truncated at 4 sigma."""
    sigma = gaussian_sigma(gain, ratio)
    half = max(1, int(math.ceil(4.0 * sigma)))
    x = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_kernel_2d(gain: float, ratio: int) -> np.ndarray:
    k = gaussian_kernel_1d(gain, ratio)
    return np.outer(k, k)


def _stacked_taps(gains, ratio) -> np.ndarray:
    # zero-pad shorter kernels so all bands share one depthwise filter shape
    kernels = [gaussian_kernel_1d(g, ratio) for g in gains]
    size = max(len(k) for k in kernels)
    out = np.zeros((len(kernels), size))
    for b, k in enumerate(kernels):
        off = (size - len(k)) // 2
        out[b, off:off + len(k)] = k
    return out


class SeparableFilter:
    """Per-band separable Gaussian, applied with replicate padding on tensors."""

    def __init__(self, gains, ratio: int):
        self.ratio = int(ratio)
        self.gains = tuple(float(g) for g in gains)
        taps = _stacked_taps(self.gains, self.ratio)
        b, k = taps.shape
        self.row_weight = E.constant(taps.reshape(b, 1, k, 1))
        self.col_weight = E.constant(taps.reshape(b, 1, 1, k))

    def filter(self, x: Tensor) -> Tensor:
        x = E.conv2d(x, self.col_weight, padding="replicate", depthwise=True)
        return E.conv2d(x, self.row_weight, padding="replicate", depthwise=True)

    def downscale(self, x: Tensor) -> Tensor:
        """Filter and keep every ``ratio``-th sample starting at ``ratio // 2``."""
        r, off = self.ratio, self.ratio // 2
        x = E.conv2d(x, self.col_weight, padding="replicate", depthwise=True)
        x = E.crop(x, cols=slice(off, None, r))
        x = E.conv2d(x, self.row_weight, padding="replicate", depthwise=True)
        return E.crop(x, rows=slice(off, None, r))


def _check_divisible(shape, ratio):
    if shape[-1] % ratio or shape[-2] % ratio:
        raise ContractViolation(f"image size {shape[-2:]} is not a multiple of the ratio {ratio}")


def mtf_downscale(x, spec: SensorSpec):
    """MTF-matched low-pass of each band followed by decimation by ``spec.ratio``."""
    arr = np.asarray(_values(x), dtype=np.float64)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[None]
    if arr.shape[0] != spec.bands:
        raise ContractViolation(f"{arr.shape[0]} bands but sensor spec lists {spec.bands} MTF gains")
    _check_divisible(arr.shape, spec.ratio)
    out = SeparableFilter(spec.ms_mtf_gains, spec.ratio).downscale(E.constant(arr[None])).values[0]
    if squeeze:
        out = out[0]
    if isinstance(x, MultispectralRaster):
        return MultispectralRaster(out, x.radiometric_range)
    return out


def lowpass_pan(pan, spec: SensorSpec):
    """PAN filtered with the PAN MTF Gaussian, kept at full resolution."""
    arr = np.asarray(_values(pan), dtype=np.float64)
    out = SeparableFilter((spec.pan_mtf_gain,), spec.ratio).filter(E.constant(arr[None, None])).values[0, 0]
    if isinstance(pan, PanRaster):
        return PanRaster(out, pan.radiometric_range)
    return out


def shift_valid_mask(height: int, width: int, dx: float, dy: float) -> np.ndarray:
    """Pixels whose shifted sample position lies inside the source grid."""
    cols = np.arange(width) + dx
    rows = np.arange(height) + dy
    vc = (cols >= 0) & (cols <= width - 1)
    vr = (rows >= 0) & (rows <= height - 1)
    return vr[:, None] & vc[None, :]


def shift_subpixel(x, offset):
    """Bilinear resampling at ``(row + dy, col + dx)`` for ``offset = (dx, dy)``.

    Returns the shifted array and a validity mask; samples that fall outside
    the source are filled with the clamped border value and marked invalid.
    """
    dx, dy = (float(v) for v in offset)
    if abs(dx) > MAX_SHIFT or abs(dy) > MAX_SHIFT:
        raise ContractViolation(f"shift ({dx}, {dy}) exceeds the +/-{MAX_SHIFT} pixel search range")
    arr = np.asarray(_values(x), dtype=np.float64)
    t = arr
    while t.ndim < 4:
        t = t[None]
    out = E.spatial_shift(E.constant(t), dx, dy).values.reshape(arr.shape)
    mask = np.broadcast_to(shift_valid_mask(arr.shape[-2], arr.shape[-1], dx, dy), arr.shape).copy()
    if isinstance(x, MultispectralRaster):
        return MultispectralRaster(out, x.radiometric_range), mask
    if isinstance(x, PanRaster):
        return PanRaster(out, x.radiometric_range), mask
    return out, mask
