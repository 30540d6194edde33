"""Target adaptation: fine-tuning network weights on the image being fused."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import engine as E
from .coregistration import CoregistrationProduct, estimate_band_shifts
from .errors import ContractViolation, NumericFailure
from .loss import LossBreakdown, LossConfig, LossTargets, total_loss
from .model import ModelWeights, forward_tensors
from .raster import SensorSpec, upsample_poly23

PRECISIONS = {"float32": np.float32, "float64": np.float64}


@dataclass(frozen=True)
class AdaptationConfig:
    iterations: int = 100
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    precision: str = "float32"
    tile_size: int = 256
    n_clusters: int = 16
    batch_tiles: int = 4
    max_sample: int = 512
    strict_tiles: bool = False

    def __post_init__(self):
        if self.lr <= 0:
            raise ContractViolation("step size must be positive")
        if self.iterations < 0:
            raise ContractViolation("iteration count must be non-negative")
        if self.precision not in PRECISIONS:
            raise ContractViolation(f"precision must be one of {sorted(PRECISIONS)}")
        if self.batch_tiles < 1 or self.tile_size < 1 or self.n_clusters < 1:
            raise ContractViolation("tile size, cluster count and batch size must be positive")

    @property
    def dtype(self):
        return PRECISIONS[self.precision]


class Adam:
    """Adaptive-moment optimiser over a dict of parameter arrays."""

    def __init__(self, params: dict, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[k] -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(params[k].dtype)


@dataclass
class Sample:
    """One tuning crop: inputs for the network and the loss targets."""

    pan: E.Tensor
    ms_up: E.Tensor
    targets: LossTargets
    anchor: tuple = (0, 0)


def tile_anchors(height: int, width: int, size: int) -> list[tuple[int, int]]:
    """Non-overlapping ``size`` tiles covering the image row-major (partial borders dropped)."""
    if size > height or size > width:
        raise ContractViolation(f"tile size {size} exceeds image {height}x{width}")
    return [(r, c) for r in range(0, height - size + 1, size) for c in range(0, width - size + 1, size)]


def build_samples(pan, ms, product: CoregistrationProduct, spec: SensorSpec, loss_cfg: LossConfig,
                  anchors=None, size: int | None = None, ms_up=None) -> list[Sample]:
    """Crop tuning samples from full-image inputs and co-registration products.

    Without ``anchors`` the whole image is one sample.
    """
    pan = np.asarray(getattr(pan, "values", pan), dtype=np.float64)
    ms = np.asarray(getattr(ms, "values", ms), dtype=np.float64)
    up = upsample_poly23(ms, spec.ratio) if ms_up is None else np.asarray(getattr(ms_up, "values", ms_up))
    if anchors is None:
        anchors, size = [(0, 0)], None
    samples = []
    for r0, c0 in anchors:
        if size is None:
            rows, cols = slice(0, pan.shape[0]), slice(0, pan.shape[1])
        else:
            rows, cols = slice(r0, r0 + size), slice(c0, c0 + size)
        targets = LossTargets.from_product(pan, ms, product, spec, loss_cfg, rows, cols)
        samples.append(Sample(E.constant(pan[None, None, rows, cols]),
                              E.constant(np.ascontiguousarray(up[None, :, rows, cols], dtype=np.float64)),
                              targets, (r0, c0)))
    return samples


def whole_image_samples(pan, ms, product, spec, loss_cfg, cfg: AdaptationConfig, ms_up=None) -> list[Sample]:
    """The full image, split into a ``tile_size`` grid when larger than ``max_sample``."""
    h, w = np.shape(getattr(pan, "values", pan))
    if max(h, w) <= cfg.max_sample:
        return build_samples(pan, ms, product, spec, loss_cfg, ms_up=ms_up)
    return build_samples(pan, ms, product, spec, loss_cfg, tile_anchors(h, w, cfg.tile_size), cfg.tile_size,
                         ms_up=ms_up)


def _mean_breakdown(items: list[LossBreakdown]) -> LossBreakdown:
    n = len(items)
    return LossBreakdown(*(sum(getattr(b, f) for b in items) / n for f in
                           ("total", "spectral_dlambda", "spectral_ergas", "spatial", "active_fraction",
                            "spectral_l1")))


def sample_loss(weights: ModelWeights, samples: list[Sample], dtype=np.float64,
                with_grad: bool = True) -> tuple[LossBreakdown, dict | None]:
    """Mean loss over ``samples`` and, optionally, its gradient w.r.t. every parameter.

    Gradients are accumulated one sample at a time so memory stays bounded
    by a single crop.
    """
    n = len(samples)
    grads = {k: np.zeros(v.shape, dtype=dtype) for k, v in weights.params.items()} if with_grad else None
    parts = []
    for s in samples:
        if with_grad:
            tape = E.Tape()
            params = {k: tape.variable(v.astype(dtype)) for k, v in weights.params.items()}
        else:
            params = {k: E.constant(v.astype(dtype)) for k, v in weights.params.items()}
        fused = forward_tensors(weights, params, s.pan, s.ms_up)
        loss, br = total_loss(fused, s.targets)
        parts.append(br)
        if with_grad:
            tape.backward(loss * (1.0 / n))
            for k, t in params.items():
                grads[k] += t.grad
    return _mean_breakdown(parts), grads


@dataclass
class AdaptationResult:
    weights: ModelWeights
    trajectory: list = field(default_factory=list)
    seconds: float = 0.0

    def write_log(self, path):
        """One JSON object per iteration: iter, total, d_lambda, ergas, spatial, wall_ms."""
        with open(path, "w") as fh:
            for rec in self.trajectory:
                fh.write(json.dumps(rec) + "\n")


def _batch_schedule(n_samples: int, batch: int, iterations: int, seed: int) -> list[list[int]]:
    # walk seeded permutations of the sample indices, batch by batch
    if batch >= n_samples:
        return [list(range(n_samples))] * iterations
    rng = np.random.default_rng(seed)
    order, out = [], []
    for _ in range(iterations):
        idx = []
        while len(idx) < batch:
            if not order:
                order = list(rng.permutation(n_samples))
            idx.append(int(order.pop(0)))
        out.append(sorted(idx))
    return out


def run_adaptation(w0: ModelWeights, samples: list[Sample], cfg: AdaptationConfig, batch: int | None = None,
                   timing: bool = True, callback=None, schedule=None) -> AdaptationResult:
    """Adam steps on the total loss.

    Iteration ``i`` uses the samples ``schedule[i]``; by default ``batch``
    samples drawn from seeded permutations (all samples when ``batch`` is None).
    """
    weights = w0.copy()
    if cfg.iterations == 0:
        return AdaptationResult(weights, [], 0.0)
    dtype = cfg.dtype
    params = {k: v.astype(dtype) for k, v in weights.params.items()}
    weights.params = params
    adam = Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    if schedule is None:
        schedule = _batch_schedule(len(samples), batch or len(samples), cfg.iterations, cfg.seed)
    trajectory = []
    start = time.perf_counter()
    for it, idx in enumerate(schedule):
        t0 = time.perf_counter()
        br, grads = sample_loss(weights, [samples[i] for i in idx], dtype)
        finite = math.isfinite(br.total) and all(np.all(np.isfinite(g)) for g in grads.values())
        if not finite:
            # every earlier step had finite gradients, so the current weights are the last good ones
            last_good = ModelWeights(weights.bands, weights.width, weights.reduction, weights.attention_kernel,
                                     weights.scale, weights.variant,
                                     {k: v.astype(np.float64) for k, v in params.items()})
            raise NumericFailure(f"non-finite loss or gradient at iteration {it}", iteration=it,
                                 last_weights=last_good)
        adam.step(params, grads)
        rec = {"iter": it, "total": br.total, "d_lambda": br.spectral_dlambda, "ergas": br.spectral_ergas,
               "spatial": br.spatial, "wall_ms": round((time.perf_counter() - t0) * 1000.0, 3) if timing else None}
        if br.spectral_l1:
            rec["l1"] = br.spectral_l1
        trajectory.append(rec)
        if callback is not None:
            callback(rec)
    weights.params = {k: v.astype(np.float64) for k, v in params.items()}
    return AdaptationResult(weights, trajectory, time.perf_counter() - start)


def target_adapt(w0: ModelWeights, pan, ms, product: CoregistrationProduct, spec: SensorSpec,
                 cfg: AdaptationConfig = AdaptationConfig(), loss_cfg: LossConfig = LossConfig(),
                 tiles=None, timing: bool = True, callback=None, ms_up=None) -> AdaptationResult:
    """Fine-tune ``w0`` on the target pair.

    With ``tiles`` (a :class:`~pansharp.tiles.TileSet`) only those tiles are
    used, ``cfg.batch_tiles`` per iteration; otherwise every iteration sees
    the whole image.
    """
    if tiles is None:
        samples = whole_image_samples(pan, ms, product, spec, loss_cfg, cfg, ms_up=ms_up)
        batch = None
    else:
        samples = build_samples(pan, ms, product, spec, loss_cfg, tiles.anchors, tiles.size, ms_up=ms_up)
        batch = cfg.batch_tiles
    return run_adaptation(w0, samples, cfg, batch, timing, callback)


def pretrain(w: ModelWeights, dataset, spec: SensorSpec, cfg: AdaptationConfig = AdaptationConfig(),
             loss_cfg: LossConfig = LossConfig(), epochs: int | None = None, products=None,
             timing: bool = True) -> AdaptationResult:
    """Epoch loop over shuffled ``(pan, ms)`` crops, one optimiser step per crop.

    ``epochs`` defaults to ``cfg.iterations``. Co-registration products are
    estimated per crop unless given.
    """
    if not dataset:
        raise ContractViolation("pretraining needs at least one crop")
    epochs = cfg.iterations if epochs is None else epochs
    if products is None:
        products = [estimate_band_shifts(p, m, spec, align=loss_cfg.align) for p, m in dataset]
    samples = []
    schedule, groups = [], []
    for (p, m), prod in zip(dataset, products):
        crop = whole_image_samples(p, m, prod, spec, loss_cfg, cfg)
        groups.append(list(range(len(samples), len(samples) + len(crop))))
        samples += crop
    rng = np.random.default_rng(cfg.seed)
    for _ in range(epochs):
        order = rng.permutation(len(groups)) if len(groups) > 1 else [0]
        schedule += [groups[int(i)] for i in order]
    run_cfg = AdaptationConfig(**{**cfg.__dict__, "iterations": len(schedule)})
    return run_adaptation(w, samples, run_cfg, timing=timing, schedule=schedule)
