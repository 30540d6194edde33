"""Raster containers and sensor description."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ContractViolation, MalformedHeader, NonFiniteValues

DEFAULT_MS_GAIN = 0.29
DEFAULT_PAN_GAIN = 0.15


def _check_finite(values: np.ndarray):
    if not np.all(np.isfinite(values)):
        raise NonFiniteValues("raster contains NaN or Inf values")


@dataclass
class MultispectralRaster:
    """B-band raster, values laid out ``(bands, height, width)``."""

    values: np.ndarray
    radiometric_range: tuple = (0.0, 2047.0)

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 3 or self.values.shape[0] < 1:
            raise ContractViolation(f"multispectral raster must be (bands, height, width); got {self.values.shape}")
        _check_finite(self.values)
        self.radiometric_range = tuple(float(v) for v in self.radiometric_range)

    @property
    def bands(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    @property
    def shape(self) -> tuple:
        return self.values.shape


@dataclass
class PanRaster:
    """Single-band high-resolution raster, values ``(height, width)``."""

    values: np.ndarray
    radiometric_range: tuple = (0.0, 2047.0)

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim == 3 and self.values.shape[0] == 1:
            self.values = self.values[0]
        if self.values.ndim != 2:
            raise ContractViolation(f"pan raster must be (height, width); got {self.values.shape}")
        _check_finite(self.values)
        self.radiometric_range = tuple(float(v) for v in self.radiometric_range)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple:
        return self.values.shape


@dataclass
class SensorSpec:
    """Resolution ratio and per-band MTF gains at the MS Nyquist frequency."""

    ratio: int = 4
    ms_mtf_gains: tuple = field(default_factory=lambda: (DEFAULT_MS_GAIN,) * 4)
    pan_mtf_gain: float = DEFAULT_PAN_GAIN
    name: str = "generic"

    def __post_init__(self):
        self.ratio = int(self.ratio)
        self.ms_mtf_gains = tuple(float(g) for g in self.ms_mtf_gains)
        self.pan_mtf_gain = float(self.pan_mtf_gain)
        if self.ratio < 2:
            raise ContractViolation(f"resolution ratio must be >= 2, got {self.ratio}")
        for g in self.ms_mtf_gains + (self.pan_mtf_gain,):
            if not 0.0 < g < 1.0:
                raise ContractViolation(f"MTF gains must lie in (0, 1); got {g}")

    @classmethod
    def default(cls, bands: int, ratio: int = 4, name: str = "generic") -> "SensorSpec":
        return cls(ratio=ratio, ms_mtf_gains=(DEFAULT_MS_GAIN,) * bands, pan_mtf_gain=DEFAULT_PAN_GAIN, name=name)

    @property
    def bands(self) -> int:
        return len(self.ms_mtf_gains)

    def to_dict(self) -> dict:
        return {"name": self.name, "ratio": self.ratio, "ms_mtf_gains": list(self.ms_mtf_gains),
                "pan_mtf_gain": self.pan_mtf_gain}

    @classmethod
    def from_dict(cls, d: dict) -> "SensorSpec":
        try:
            return cls(ratio=d["ratio"], ms_mtf_gains=d["ms_mtf_gains"], pan_mtf_gain=d["pan_mtf_gain"],
                       name=d.get("name", "generic"))
        except KeyError as exc:
            raise MalformedHeader(f"sensor spec is missing field {exc}") from exc

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "SensorSpec":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise MalformedHeader(f"{path}: {exc}") from exc
