"""Residual fusion network with residual channel/spatial attention blocks.

Layout (``F`` feature maps, 3x3 convolutions with replicate padding)::

    [MS_up, PAN] -> conv+ReLU -> conv+ReLU -> R-CBAM -> ResBlock
                 -> R-CBAM -> ResBlock -> conv (B maps) -> + MS_up

Inputs are divided by a radiometric scale before entering the trunk and the
trunk output is multiplied back, so outputs stay in sensor units.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import engine as E
from .engine import Tensor
from .errors import ContractViolation, MalformedHeader, TruncatedPayload

VARIANTS = ("full", "a", "b", "c")
OUTPUT_GAIN = 0.02


@dataclass
class ModelWeights:
    bands: int
    width: int = 64
    reduction: int = 16
    attention_kernel: int = 7
    scale: float = 2047.0
    variant: str = "full"
    params: dict = field(default_factory=dict)

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "ModelWeights":
        return ModelWeights(self.bands, self.width, self.reduction, self.attention_kernel, self.scale,
                            self.variant, {k: v.copy() for k, v in self.params.items()})

    def trunk_conv_names(self) -> list[str]:
        return [k[:-2] for k in self.params if k.endswith(".w") and ".mlp" not in k and ".spatial" not in k]

    def zero_trunk(self) -> "ModelWeights":
        """Copy with the output convolution zeroed, so the network returns the upsampled MS."""
        w = self.copy()
        w.params["out.w"][:] = 0.0
        w.params["out.b"][:] = 0.0
        return w

    def save(self, path) -> Path:
        """JSON manifest plus a little-endian float32 payload next to it."""
        path = Path(path)
        header = path.with_suffix(".json")
        payload = path.with_suffix(".bin")
        entries, offset = [], 0
        for name, arr in self.params.items():
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.size
        manifest = {"format": "pansharp-weights", "version": 1, "bands": self.bands, "width": self.width,
                    "reduction": self.reduction, "attention_kernel": self.attention_kernel,
                    "scale": self.scale, "variant": self.variant, "dtype": "f32le",
                    "payload": payload.name, "tensors": entries}
        header.parent.mkdir(parents=True, exist_ok=True)
        flat = np.concatenate([a.ravel() for a in self.params.values()]) if self.params else np.zeros(0)
        flat.astype("<f4").tofile(payload)
        header.write_text(json.dumps(manifest, indent=1) + "\n")
        return header

    @classmethod
    def load(cls, path) -> "ModelWeights":
        header = Path(path).with_suffix(".json")
        try:
            m = json.loads(header.read_text())
        except (FileNotFoundError, json.JSONDecodeError) as exc:
            raise MalformedHeader(f"{header}: cannot read weights manifest ({exc})") from exc
        if m.get("format") != "pansharp-weights":
            raise MalformedHeader(f"{header}: not a weights manifest")
        data = np.fromfile(header.parent / m["payload"], dtype="<f4").astype(np.float64)
        params = {}
        for e in m["tensors"]:
            n = int(np.prod(e["shape"]))
            if e["offset"] + n > data.size:
                raise TruncatedPayload(f"{header}: payload too short for tensor {e['name']}")
            params[e["name"]] = data[e["offset"]:e["offset"] + n].reshape(e["shape"]).copy()
        return cls(m["bands"], m["width"], m["reduction"], m["attention_kernel"], m["scale"],
                   m.get("variant", "full"), params)


def _layer_shapes(bands: int, width: int, reduction: int, att_k: int, variant: str) -> list[tuple]:
    f, hidden = width, max(1, width // reduction)
    conv = lambda name, cout, cin, k: [(f"{name}.w", (cout, cin, k, k)), (f"{name}.b", (1, cout, 1, 1))]
    shapes = conv("conv1", f, bands + 1, 3) + conv("conv2", f, f, 3)

    def cbam(name):
        return (conv(f"{name}.mlp1", hidden, f, 1) + conv(f"{name}.mlp2", f, hidden, 1)
                + conv(f"{name}.spatial", 1, 2, att_k))

    def res(name):
        return conv(f"{name}.conv_a", f, f, 3) + conv(f"{name}.conv_b", f, f, 3)

    if variant == "full" or variant == "c":
        shapes += cbam("att1") + res("res1") + cbam("att2") + res("res2")
    elif variant == "b":
        shapes += res("res1") + res("res2")
    shapes += conv("out", bands, f, 3)
    return shapes


def init_model(bands: int, seed: int = 0, width: int = 64, reduction: int = 16, attention_kernel: int = 7,
               scale: float = 2047.0, variant: str = "full") -> ModelWeights:
    """He-normal convolution weights and zero biases.

    The last conv of each residual branch is scaled by 0.1 and the linear
    output conv uses unit gain scaled by ``OUTPUT_GAIN``, keeping the initial output
    close to the upsampled MS.
    """
    if variant not in VARIANTS:
        raise ContractViolation(f"unknown model variant {variant!r}")
    if bands < 1 or width < 1:
        raise ContractViolation("bands and width must be positive")
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in _layer_shapes(bands, width, reduction, attention_kernel, variant):
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
            continue
        fan_in = shape[1] * shape[2] * shape[3]
        w = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        if name == "out.w":
            # linear layer: unit gain, then shrunk so the start point is close to MS_up
            w *= OUTPUT_GAIN / np.sqrt(2.0)
        elif name.endswith("conv_b.w"):
            w *= 0.1
        params[name] = w
    return ModelWeights(bands, width, reduction, attention_kernel, float(scale), variant, params)


def _conv(p: dict, name: str, x: Tensor, padding: str = "replicate") -> Tensor:
    return E.conv2d(x, p[f"{name}.w"], padding=padding) + p[f"{name}.b"]


def resblock(p: dict, name: str, x: Tensor) -> Tensor:
    """``x + conv(gelu(conv(x)))``."""
    return x + _conv(p, f"{name}.conv_b", E.gelu(_conv(p, f"{name}.conv_a", x)))


def rcbam(p: dict, name: str, x: Tensor, residual: bool = True) -> Tensor:
    """Channel then spatial attention, added back to the input when ``residual``."""
    def mlp(v):
        return _conv(p, f"{name}.mlp2", E.relu(_conv(p, f"{name}.mlp1", v, "valid")), "valid")

    ch = E.sigmoid(mlp(E.global_avg_pool(x)) + mlp(E.global_max_pool(x)))
    y = x * ch
    sp = E.sigmoid(_conv(p, f"{name}.spatial", E.concat_channels([E.channel_max(y), E.channel_avg(y)])))
    y = y * sp
    return x + y if residual else y


def forward_tensors(weights: ModelWeights, params: dict, pan: Tensor, ms_up: Tensor) -> Tensor:
    """Network output for ``(1, 1, H, W)`` PAN and ``(1, B, H, W)`` upsampled MS tensors.

    The trunk runs in the precision of ``params``; the skip connection and
    the returned image keep the precision of ``ms_up``.
    """
    dtype = params["conv1.w"].dtype
    inv = 1.0 / weights.scale
    x = E.cast(E.concat_channels([ms_up, pan]) * inv, dtype)
    x = E.relu(_conv(params, "conv1", x))
    x = E.relu(_conv(params, "conv2", x))
    v = weights.variant
    if v in ("full", "c"):
        x = rcbam(params, "att1", x, residual=v == "full")
        x = resblock(params, "res1", x)
        x = rcbam(params, "att2", x, residual=v == "full")
        x = resblock(params, "res2", x)
    elif v == "b":
        x = resblock(params, "res2", resblock(params, "res1", x))
    return ms_up + E.cast(_conv(params, "out", x), ms_up.dtype) * weights.scale


def _forward_full(weights, pan, ms_up, dtype):
    params = {k: E.constant(v.astype(dtype)) for k, v in weights.params.items()}
    return forward_tensors(weights, params, E.constant(pan[None, None]), E.constant(ms_up[None])).values[0]


def forward(weights: ModelWeights, pan, ms_up, dtype=np.float64, tile: int | None = None,
            halo: int = 32, max_pixels: int = 1024 * 1024) -> np.ndarray:
    """Fused ``(B, H, W)`` image from a ``(H, W)`` PAN and the ``(B, H, W)`` upsampled MS.

    ``dtype`` sets the precision of the trunk; the output is always float64.
    Images above ``max_pixels`` (or any image when ``tile`` is given) are
    processed in ``tile``-sized blocks with a ``halo`` of context on each
    side; channel attention then pools over each padded block rather than
    the whole image.
    """
    pan = np.asarray(getattr(pan, "values", pan), dtype=np.float64)
    ms_up = np.asarray(getattr(ms_up, "values", ms_up), dtype=np.float64)
    if ms_up.shape[0] != weights.bands or ms_up.shape[1:] != pan.shape:
        raise ContractViolation(f"input shapes PAN {pan.shape} / MS {ms_up.shape} do not fit a "
                                f"{weights.bands}-band model")
    h, w = pan.shape
    if tile is None:
        if h * w <= max_pixels:
            return _forward_full(weights, pan, ms_up, dtype)
        tile = 512
    out = np.empty_like(ms_up)
    for r0 in range(0, h, tile):
        for c0 in range(0, w, tile):
            r1, c1 = min(r0 + tile, h), min(c0 + tile, w)
            pr0, pc0 = max(r0 - halo, 0), max(c0 - halo, 0)
            pr1, pc1 = min(r1 + halo, h), min(c1 + halo, w)
            block = _forward_full(weights, pan[pr0:pr1, pc0:pc1], ms_up[:, pr0:pr1, pc0:pc1], dtype)
            out[:, r0:r1, c0:c1] = block[:, r0 - pr0:r1 - pr0, c0 - pc0:c1 - pc0]
    return out
