"""Run configuration: an INI file with one section per component plus dotted flag overrides."""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field
from pathlib import Path

from .adaptation import AdaptationConfig
from .errors import ContractViolation, UnsupportedConfiguration
from .loss import LossConfig
from .metrics import MetricConfig
from .raster import SensorSpec


@dataclass(frozen=True)
class SensorSection:
    name: str = "generic"
    ratio: int = 4
    ms_mtf_gains: str = ""
    pan_mtf_gain: float = 0.15
    file: str = ""


@dataclass(frozen=True)
class ModelSection:
    width: int = 64
    reduction: int = 16
    attention_kernel: int = 7
    seed: int = 0
    scale: float = 0.0
    variant: str = "full"


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    threads: int = 0


SECTIONS = {
    "sensor": SensorSection,
    "metrics": MetricConfig,
    "loss": LossConfig,
    "adaptation": AdaptationConfig,
    "model": ModelSection,
    "run": RunSection,
}


def _coerce(raw: str, default, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if default is None:
            return None if raw.lower() in ("", "none") else int(raw)
        return raw
    except ValueError as exc:
        raise ContractViolation(f"config value {key}={raw!r} is not a valid {type(default).__name__}") from exc


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


@dataclass
class RunConfig:
    sections: dict = field(default_factory=lambda: {k: cls() for k, cls in SECTIONS.items()})

    @classmethod
    def load(cls, path=None, overrides=()) -> "RunConfig":
        values = {name: {f.name: getattr(c(), f.name) for f in dataclasses.fields(c)} for name, c in SECTIONS.items()}
        if path is not None:
            parser = configparser.ConfigParser()
            try:
                with open(path) as fh:
                    parser.read_file(fh)
            except FileNotFoundError as exc:
                raise ContractViolation(f"config file not found: {path}") from exc
            except configparser.Error as exc:
                raise ContractViolation(f"{path}: {exc}") from exc
            for section in parser.sections():
                for key, raw in parser.items(section):
                    cls._set(values, section, key, raw)
        for item in overrides:
            if "=" not in item or "." not in item.split("=", 1)[0]:
                raise ContractViolation(f"override {item!r} is not of the form section.key=value")
            lhs, raw = item.split("=", 1)
            section, key = lhs.split(".", 1)
            cls._set(values, section, key, raw)
        try:
            sections = {name: SECTIONS[name](**vals) for name, vals in values.items()}
        except (TypeError, ValueError) as exc:
            raise ContractViolation(f"invalid configuration: {exc}") from exc
        return cls(sections)

    @staticmethod
    def _set(values, section, key, raw):
        if section not in values:
            raise ContractViolation(f"unknown config section [{section}]")
        if key not in values[section]:
            raise ContractViolation(f"unknown config key {section}.{key}")
        default = getattr(SECTIONS[section](), key)
        values[section][key] = _coerce(raw, default, f"{section}.{key}")

    def __getattr__(self, name):
        sections = self.__dict__.get("sections", {})
        if name in sections:
            return sections[name]
        raise AttributeError(name)

    def sensor_spec(self, bands: int) -> SensorSpec:
        s = self.sections["sensor"]
        if s.file:
            spec = SensorSpec.load(s.file)
        else:
            gains = [float(g) for g in s.ms_mtf_gains.split(",") if g.strip()] or [0.29] * bands
            spec = SensorSpec(ratio=s.ratio, ms_mtf_gains=gains, pan_mtf_gain=s.pan_mtf_gain, name=s.name)
        if spec.bands != bands:
            raise UnsupportedConfiguration(f"sensor lists {spec.bands} MTF gains but the MS image has {bands} bands")
        return spec

    def metric_config(self, ratio: int) -> MetricConfig:
        return dataclasses.replace(self.sections["metrics"], ratio=ratio)

    def to_ini(self) -> str:
        parser = configparser.ConfigParser()
        for name, sec in self.sections.items():
            parser[name] = {f.name: _fmt(getattr(sec, f.name)) for f in dataclasses.fields(sec)}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def echo(self, out_dir) -> Path:
        path = Path(out_dir) / "config.ini"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_ini())
        return path
