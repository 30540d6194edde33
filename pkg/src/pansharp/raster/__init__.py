"""Raster containers, file I/O and resampling filters."""

from .filters import (MAX_SHIFT, SeparableFilter, gaussian_kernel_1d, gaussian_kernel_2d, gaussian_sigma,
                      interpolator_taps, lowpass_pan, mtf_downscale, shift_subpixel, shift_valid_mask,
                      upsample_poly23)
from .io import load_pgm, load_raster, raster_paths, save_raster
from .synthetic import SceneRecord, make_synthetic_scene
from .types import MultispectralRaster, PanRaster, SensorSpec

__all__ = [
    "MAX_SHIFT", "MultispectralRaster", "PanRaster", "SceneRecord", "SensorSpec", "SeparableFilter",
    "gaussian_kernel_1d", "gaussian_kernel_2d", "gaussian_sigma", "interpolator_taps", "load_pgm",
    "load_raster", "lowpass_pan", "make_synthetic_scene", "mtf_downscale", "raster_paths", "save_raster",
    "shift_subpixel", "shift_valid_mask", "upsample_poly23",
]
