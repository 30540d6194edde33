"""On-disk raster format: a JSON header next to a raw little-endian float32 payload."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..errors import MalformedHeader, RasterLoadError, TruncatedPayload
from .types import MultispectralRaster, PanRaster

_REQUIRED = ("width", "height", "bands", "dtype", "layout")


def raster_paths(path) -> tuple[Path, Path]:
    """Header and payload paths for ``foo``, ``foo.json`` or ``foo.bin``."""
    p = Path(path)
    stem = p.with_suffix("") if p.suffix in (".json", ".bin") else p
    return stem.with_suffix(".json"), stem.with_suffix(".bin")


def save_raster(path, raster) -> Path:
    header_path, payload_path = raster_paths(path)
    vals = raster.values
    if isinstance(raster, PanRaster):
        vals = vals[None]
        kind = "pan"
    else:
        kind = "ms"
    b, h, w = vals.shape
    header = {"width": w, "height": h, "bands": b, "dtype": "f32le", "layout": "band-sequential",
              "radiometric_range": list(raster.radiometric_range), "kind": kind, "payload": payload_path.name}
    header_path.parent.mkdir(parents=True, exist_ok=True)
    np.ascontiguousarray(vals, dtype="<f4").tofile(payload_path)
    header_path.write_text(json.dumps(header, indent=2) + "\n")
    return header_path


def load_raster(path):
    """Read a raster; PAN if the header says so (or has a single band and no kind)."""
    header_path, payload_path = raster_paths(path)
    try:
        header = json.loads(header_path.read_text())
    except FileNotFoundError as exc:
        raise RasterLoadError(f"{header_path}: no such header") from exc
    except json.JSONDecodeError as exc:
        raise MalformedHeader(f"{header_path}: invalid JSON ({exc})") from exc
    missing = [k for k in _REQUIRED if k not in header]
    if missing:
        raise MalformedHeader(f"{header_path}: missing fields {missing}")
    if header["dtype"] != "f32le" or header["layout"] != "band-sequential":
        raise MalformedHeader(f"{header_path}: unsupported dtype/layout {header['dtype']}/{header['layout']}")
    try:
        w, h, b = int(header["width"]), int(header["height"]), int(header["bands"])
    except (TypeError, ValueError) as exc:
        raise MalformedHeader(f"{header_path}: non-integer dimensions") from exc
    if min(w, h, b) < 1:
        raise MalformedHeader(f"{header_path}: dimensions must be positive")
    if "payload" in header:
        payload_path = header_path.parent / header["payload"]
    try:
        data = np.fromfile(payload_path, dtype="<f4")
    except FileNotFoundError as exc:
        raise TruncatedPayload(f"{payload_path}: payload file missing") from exc
    if data.size < w * h * b:
        raise TruncatedPayload(f"{payload_path}: expected {w * h * b} samples, found {data.size}")
    if data.size > w * h * b:
        raise MalformedHeader(f"{payload_path}: {data.size - w * h * b} trailing samples beyond the header size")
    vals = data.reshape(b, h, w).astype(np.float32)
    rng = tuple(header.get("radiometric_range", (0.0, float(vals.max()) if vals.size else 1.0)))
    kind = header.get("kind", "pan" if b == 1 else "ms")
    if kind == "pan":
        if b != 1:
            raise MalformedHeader(f"{header_path}: pan raster with {b} bands")
        return PanRaster(vals[0], rng)
    return MultispectralRaster(vals, rng)


def _pgm_tokens(data: bytes):
    pos, tokens = 0, []
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise MalformedHeader("PGM header ended early")
        tokens.append(data[start:pos])
    return tokens, pos + 1


def load_pgm(path, radiometric_range=None) -> PanRaster:
    """Import a binary (P5) PGM, 8- or 16-bit, as a PAN raster."""
    data = Path(path).read_bytes()
    tokens, offset = _pgm_tokens(data)
    if tokens[0] != b"P5":
        raise MalformedHeader(f"{path}: only binary P5 PGM is supported")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise MalformedHeader(f"{path}: bad PGM header") from exc
    dtype = ">u2" if maxval > 255 else "u1"
    n = w * h
    raw = np.frombuffer(data, dtype=dtype, count=min(n, (len(data) - offset) // np.dtype(dtype).itemsize),
                        offset=offset)
    if raw.size < n:
        raise TruncatedPayload(f"{path}: expected {n} samples, found {raw.size}")
    rng = radiometric_range or (0.0, float(maxval))
    return PanRaster(raw.reshape(h, w).astype(np.float32), rng)
