"""Finite-difference verification suite for every differentiable op and the composed loss."""

from __future__ import annotations

import numpy as np

from . import engine as E
from .coregistration import CoregistrationProduct, shift_grid
from .engine import GradCheckReport, grad_check
from .loss import LossConfig, LossTargets, total_loss
from .metrics import CorrelationField
from .raster import SensorSpec, make_synthetic_scene, mtf_downscale, upsample_poly23

STEP = 1e-4
TOLERANCE = 1e-3


def _projected(op, shape, rng):
    # contract the op output with fixed random weights so every element matters
    weights = {}

    def f(x):
        y = op(x)
        if "w" not in weights:
            weights["w"] = E.constant(rng.standard_normal(y.shape))
        return E.sum_(y * weights["w"])

    return f


def _op_cases(rng):
    c = lambda *s: E.constant(rng.standard_normal(s))
    pos = lambda *s: rng.uniform(0.5, 2.0, s)
    away = lambda *s: np.sign(rng.standard_normal(s)) * rng.uniform(0.2, 1.5, s)
    k33, kdw = c(3, 2, 3, 3), c(2, 1, 3, 3)
    m = c(1, 2, 5, 3)
    other = c(1, 1, 4, 5)
    return [
        ("add", lambda x: x + other, rng.standard_normal((1, 2, 4, 5))),
        ("sub", lambda x: other - x, rng.standard_normal((1, 2, 4, 5))),
        ("mul", lambda x: x * x * other, rng.standard_normal((1, 2, 4, 5))),
        ("div", lambda x: (x + 3.0) / x, pos(1, 2, 4, 5)),
        ("sqrt", E.sqrt, pos(1, 2, 4, 5)),
        ("square", E.square, rng.standard_normal((1, 2, 4, 5))),
        ("neg", E.neg, rng.standard_normal((1, 2, 4, 5))),
        ("clamp_min", lambda x: E.clamp_min(x, 0.0), away(1, 2, 4, 5)),
        ("abs", E.abs_, away(1, 2, 4, 5)),
        ("sum", lambda x: E.sum_(x, axis=(1, 3)), rng.standard_normal((1, 3, 4, 5))),
        ("mean", lambda x: E.mean(x, axis=2), rng.standard_normal((1, 3, 4, 5))),
        ("windowed_mean", lambda x: E.windowed_mean(x, 3, 2), rng.standard_normal((1, 2, 7, 8))),
        ("windowed_mean/stride1", lambda x: E.windowed_mean(x, (2, 3)), rng.standard_normal((1, 2, 5, 6))),
        ("conv2d/zero", lambda x: E.conv2d(x, k33, padding="zero"), rng.standard_normal((1, 2, 5, 6))),
        ("conv2d/replicate", lambda x: E.conv2d(x, k33, padding="replicate"), rng.standard_normal((1, 2, 5, 6))),
        ("conv2d/valid", lambda x: E.conv2d(x, k33, padding="valid"), rng.standard_normal((2, 2, 5, 6))),
        ("conv2d/depthwise", lambda x: E.conv2d(x, kdw, padding="replicate", depthwise=True),
         rng.standard_normal((1, 2, 5, 6))),
        ("conv2d/weight", lambda wt: E.conv2d(E.constant(np.linspace(-1, 1, 60).reshape(1, 2, 5, 6)), wt,
                                              padding="replicate"), rng.standard_normal((3, 2, 3, 3))),
        ("matmul", lambda x: E.matmul(x, m), rng.standard_normal((1, 2, 4, 5))),
        ("relu", E.relu, away(1, 2, 4, 5)),
        ("gelu", E.gelu, rng.standard_normal((1, 2, 4, 5))),
        ("sigmoid", E.sigmoid, rng.standard_normal((1, 2, 4, 5))),
        ("global_max_pool", E.global_max_pool, rng.permutation(40).reshape(1, 2, 4, 5) * 0.1),
        ("global_avg_pool", E.global_avg_pool, rng.standard_normal((1, 2, 4, 5))),
        ("channel_max", E.channel_max, rng.permutation(60).reshape(1, 3, 4, 5) * 0.1),
        ("channel_avg", E.channel_avg, rng.standard_normal((1, 3, 4, 5))),
        ("concat_channels", lambda x: E.concat_channels([x, E.square(x), other]), rng.standard_normal((1, 1, 4, 5))),
        ("spatial_shift", lambda x: E.spatial_shift(x, 0.5, -1.25), rng.standard_normal((1, 2, 6, 7))),
        ("crop", lambda x: E.crop(x, channels=slice(1, 3), rows=slice(1, None, 2), cols=slice(0, 4)),
         rng.standard_normal((1, 3, 6, 5))),
        ("cast", lambda x: E.cast(E.cast(x, np.float32), np.float64), rng.standard_normal((1, 2, 3, 4))),
    ]


def op_reports(seed: int = 0) -> list[tuple[str, GradCheckReport]]:
    rng = np.random.default_rng(seed)
    out = []
    for name, op, point in _op_cases(rng):
        # float32 round trips need a coarser step to keep rounding below the tolerance
        step = 1e-2 if name == "cast" else STEP
        out.append((name, grad_check(_projected(op, point.shape, rng), point, step=step, tolerance=TOLERANCE)))
    return out


def detach_blocks_gradient(seed: int = 0) -> bool:
    """``detach`` is a stop-gradient: its input receives no gradient."""
    rng = np.random.default_rng(seed)
    tape = E.Tape()
    x = tape.variable(rng.standard_normal((1, 2, 3, 3)))
    loss = E.sum_(E.square(E.detach(x))) + E.sum_(x * 0.0)
    tape.backward(loss)
    return bool(np.all(x.grad == 0))


def loss_case(size: int = 16, bands: int = 4, shifts=None, seed: int = 0):
    """A synthetic pair with targets for the full loss and a perturbed starting point."""
    rng = np.random.default_rng(seed)
    spec = SensorSpec.default(bands)
    gt, pan, ms, _ = make_synthetic_scene(seed, max(size, 32), bands, spec)
    pan_v = pan.values[:size, :size].astype(np.float64)
    gt_v = gt.values[:, :size, :size].astype(np.float64)
    ms_v = mtf_downscale(gt_v, spec)
    alignment = np.zeros((bands, 2)) if shifts is None else np.asarray(shifts, dtype=np.float64)
    rho = CorrelationField(rng.uniform(0.3, 0.95, (bands, size, size)), np.ones((bands, size, size), bool),
                           spec.ratio ** 2)
    product = CoregistrationProduct(alignment, rho, np.zeros((bands, 13, 13)), shift_grid())
    targets = LossTargets.from_product(pan_v, ms_v, product, spec, LossConfig())
    start = upsample_poly23(ms_v, spec.ratio) + 5.0 * rng.standard_normal((bands, size, size))
    return targets, start[None]


def loss_reports(seed: int = 0) -> list[tuple[str, GradCheckReport]]:
    out = []
    targets, start = loss_case(16, 4, None, seed)
    out.append(("total_loss/16x16", grad_check(lambda x: total_loss(x, targets)[0], start, step=STEP,
                                              tolerance=TOLERANCE)))
    targets, start = loss_case(32, 4, [(0.5, -1.0), (0.0, 0.0), (-1.5, 0.5), (1.0, 1.0)], seed)
    # radiometric-scale inputs: a step matched to the pixel scale keeps round-off below the tolerance
    out.append(("total_loss/32x32/aligned", grad_check(lambda x: total_loss(x, targets)[0], start, step=1e-2,
                                                      tolerance=TOLERANCE, elements=400, seed=seed)))
    return out


def run_suite(seed: int = 0) -> list[tuple[str, bool, str]]:
    """Every check as ``(name, passed, summary)``."""
    rows = [(n, r.passed, r.summary()) for n, r in op_reports(seed) + loss_reports(seed)]
    ok = detach_blocks_gradient(seed)
    rows.append(("detach", ok, "PASS stop-gradient" if ok else "FAIL gradient leaked through detach"))
    return rows
