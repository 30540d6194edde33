"""Quality indices: correlation fields, UIQI, Q2^n, ERGAS and the no-reference indices.

Each index has a tensor form (``*_t``) built from engine ops so the training
losses reuse the exact same arithmetic, and a plain-array wrapper returning
python floats.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import engine as E
from .engine import Tensor
from .errors import ContractViolation, DegenerateReference

EPS = 1e-8


@dataclass(frozen=True)
class MetricConfig:
    ratio: int = 4
    window: int = 32
    stride: int = 32
    sigma: int | None = None
    eps: float = EPS

    @property
    def local_sigma(self) -> int:
        return self.sigma if self.sigma is not None else self.ratio


@dataclass
class CorrelationField:
    """Per-band local correlation, full image size, with a validity mask.

    Entry ``(b, i, j)`` is the correlation over the ``sigma x sigma`` window
    whose rows span ``i - sigma//2 .. i - sigma//2 + sigma - 1`` (same for
    columns). ``mask`` is False where the window leaves the image or either
    signal is flat.
    """

    values: np.ndarray
    mask: np.ndarray
    sigma: int

    @property
    def bands(self) -> int:
        return self.values.shape[0]

    def valid_domain(self) -> tuple[np.ndarray, np.ndarray]:
        """Values and mask restricted to window centres inside the image."""
        s, h, w = self.sigma, self.values.shape[1], self.values.shape[2]
        rows = slice(s // 2, s // 2 + h - s + 1)
        cols = slice(s // 2, s // 2 + w - s + 1)
        return self.values[:, rows, cols], self.mask[:, rows, cols]

    def mean(self) -> np.ndarray:
        """Mean correlation over valid entries, per band (NaN if none)."""
        out = np.full(self.bands, np.nan)
        for b in range(self.bands):
            if self.mask[b].any():
                out[b] = self.values[b][self.mask[b]].mean()
        return out


def _t(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(getattr(x, "values", x), dtype=np.float64)
    while arr.ndim < 4:
        arr = arr[None]
    return Tensor(arr)


def _centred(x: Tensor) -> tuple[Tensor, np.ndarray]:
    """``x`` minus its (constant) per-channel mean, and that mean.

    Second moments are shift invariant; computing them on centred data
    avoids cancelling large squared means against each other.
    """
    offset = x.values.mean(axis=(0, 2, 3), keepdims=True)
    return x - E.constant(offset), offset


# ---------------------------------------------------------------------------
# correlation
# ---------------------------------------------------------------------------

def corrcoef(x, y, eps: float = EPS) -> float:
    """Pearson correlation of two equally shaped arrays; NaN if either variance < eps."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ContractViolation(f"corrcoef: shapes {x.shape} and {y.shape} differ")
    xc, yc = x - x.mean(), y - y.mean()
    vx, vy = (xc * xc).mean(), (yc * yc).mean()
    if vx < eps or vy < eps:
        return math.nan
    return float(np.clip((xc * yc).mean() / math.sqrt(vx * vy), -1.0, 1.0))


def local_correlation_t(a: Tensor, b: Tensor, sigma: int, eps: float = EPS) -> tuple[Tensor, np.ndarray]:
    """Windowed correlation of ``a`` against each channel of ``b``.

    Both are ``(1, C, H, W)`` (``a`` may have one channel and broadcasts).
    Returns the correlation over all ``sigma``-windows inside the image,
    shape ``(1, C, H - sigma + 1, W - sigma + 1)``, and a boolean mask that is
    False where either windowed variance is below ``eps``.
    """
    if sigma < 2:
        raise ContractViolation(f"correlation window must be >= 2, got {sigma}")
    if a.shape[2:] != b.shape[2:]:
        raise ContractViolation(f"local correlation: spatial shapes {a.shape} and {b.shape} differ")
    if sigma > a.shape[2] or sigma > a.shape[3]:
        raise ContractViolation(f"correlation window {sigma} exceeds image {a.shape[2:]}")
    a, _ = _centred(a)
    b, _ = _centred(b)
    mu_a = E.windowed_mean(a, sigma)
    mu_b = E.windowed_mean(b, sigma)
    cov = E.windowed_mean(a * b, sigma) - mu_a * mu_b
    var_a = E.windowed_mean(E.square(a), sigma) - E.square(mu_a)
    var_b = E.windowed_mean(E.square(b), sigma) - E.square(mu_b)
    flat = (var_a.values < eps) | (var_b.values < eps)
    den = E.sqrt(E.clamp_min(var_a * var_b, eps))
    rho = cov / den
    return rho, np.broadcast_to(~flat, rho.shape)


def local_correlation_field(a, b, sigma: int, eps: float = EPS) -> CorrelationField:
    """Full-size field of local correlations between a single-band ``a`` and each band of ``b``."""
    a_arr = np.asarray(getattr(a, "values", a), dtype=np.float64)
    b_arr = np.asarray(getattr(b, "values", b), dtype=np.float64)
    if b_arr.ndim == 2:
        b_arr = b_arr[None]
    if a_arr.ndim != 2:
        raise ContractViolation("local_correlation_field expects a 2-D first argument")
    rho, valid = local_correlation_t(_t(a_arr), _t(b_arr), sigma, eps)
    bands, h, w = b_arr.shape
    values = np.zeros((bands, h, w))
    mask = np.zeros((bands, h, w), dtype=bool)
    rows = slice(sigma // 2, sigma // 2 + h - sigma + 1)
    cols = slice(sigma // 2, sigma // 2 + w - sigma + 1)
    values[:, rows, cols] = np.clip(rho.values[0], -1.0, 1.0)
    mask[:, rows, cols] = valid[0]
    values[~mask] = 0.0
    return CorrelationField(values, mask, sigma)


# ---------------------------------------------------------------------------
# UIQI and Q2^n
# ---------------------------------------------------------------------------

def _window(cfg: MetricConfig, h: int, w: int) -> tuple[tuple[int, int], int]:
    kh, kw = min(cfg.window, h), min(cfg.window, w)
    return (kh, kw), max(1, min(cfg.stride, kh, kw))


def uiqi_t(x: Tensor, y: Tensor, cfg: MetricConfig = MetricConfig()) -> Tensor:
    """Mean over windows and bands of the universal image quality index."""
    size, stride = _window(cfg, x.shape[2], x.shape[3])
    xc, ox = _centred(x)
    yc, oy = _centred(y)
    mxc, myc = E.windowed_mean(xc, size, stride), E.windowed_mean(yc, size, stride)
    vx = E.windowed_mean(E.square(xc), size, stride) - E.square(mxc)
    vy = E.windowed_mean(E.square(yc), size, stride) - E.square(myc)
    cxy = E.windowed_mean(xc * yc, size, stride) - mxc * myc
    mx, my = mxc + E.constant(ox), myc + E.constant(oy)
    num = 4.0 * cxy * mx * my
    den = E.clamp_min((vx + vy) * (E.square(mx) + E.square(my)), cfg.eps)
    return E.mean(num / den)


def uiqi(x, y, cfg: MetricConfig = MetricConfig()) -> float:
    x, y = _t(x), _t(y)
    if x.shape != y.shape:
        raise ContractViolation(f"uiqi: shapes {x.shape} and {y.shape} differ")
    return uiqi_t(x, y, cfg).item()


def _cd_mult(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    # Cayley-Dickson: (a, b)(c, d) = (ac - conj(d) b, d a + b conj(c))
    n = len(p)
    if n == 1:
        return p * q
    h = n // 2
    a, b, c, d = p[:h], p[h:], q[:h], q[h:]
    return np.concatenate([_cd_mult(a, c) - _cd_mult(_cd_conj(d), b), _cd_mult(d, a) + _cd_mult(b, _cd_conj(c))])


def _cd_conj(p: np.ndarray) -> np.ndarray:
    out = -p.copy()
    out[0] = p[0]
    return out


def hypercomplex_mult(p, q) -> np.ndarray:
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or len(p) not in (1, 2, 4, 8):
        raise ContractViolation("hypercomplex numbers need 1, 2, 4 or 8 components")
    return _cd_mult(p, q)


def hypercomplex_conj(p) -> np.ndarray:
    return _cd_conj(np.asarray(p, dtype=np.float64))


@lru_cache(maxsize=None)
def conj_product_table(n: int) -> np.ndarray:
    """``T[k, i, j]`` such that ``(x * conj(y))_k = sum_ij T[k, i, j] x_i y_j``."""
    eye = np.eye(n)
    table = np.zeros((n, n, n))
    for i in range(n):
        for j in range(n):
            table[:, i, j] = _cd_mult(eye[i], _cd_conj(eye[j]))
    table.setflags(write=False)
    return table


def algebra_size(bands: int) -> int:
    if bands < 1 or bands > 8:
        raise ContractViolation(f"Q2^n supports 1 to 8 bands, got {bands}")
    n = 1
    while n < bands:
        n *= 2
    return n


def q2n_t(x: Tensor, y: Tensor, cfg: MetricConfig = MetricConfig()) -> Tensor:
    """Windowed hypercomplex quality index averaged over windows.

    Bands are the components of a hypercomplex number (zero-padded to 2^k).
    Per window the index is
    ``4 |cov(x, y)| |mu_x| |mu_y| / ((s_x^2 + s_y^2)(|mu_x|^2 + |mu_y|^2))``
    with ``cov(x, y) = E[x conj(y)] - mu_x conj(mu_y)``.
    """
    if x.shape != y.shape:
        raise ContractViolation(f"q2n: shapes {x.shape} and {y.shape} differ")
    bands = x.shape[1]
    n = algebra_size(bands)
    if n > bands:
        zeros = E.constant(np.zeros((1, n - bands) + x.shape[2:]))
        x = E.concat_channels([x, zeros])
        y = E.concat_channels([y, zeros])
    size, stride = _window(cfg, x.shape[2], x.shape[3])

    table = conj_product_table(n)
    pairs = [(i, j) for i in range(n) for j in range(n) if np.any(table[:, i, j])]
    sel_i = np.zeros((len(pairs), n, 1, 1))
    sel_j = np.zeros((len(pairs), n, 1, 1))
    mix = np.zeros((n, len(pairs), 1, 1))
    for p, (i, j) in enumerate(pairs):
        sel_i[p, i] = 1.0
        sel_j[p, j] = 1.0
        mix[:, p, 0, 0] = table[:, i, j]
    sel_i, sel_j, mix = E.constant(sel_i), E.constant(sel_j), E.constant(mix)

    def conj_product(u: Tensor, v: Tensor) -> Tensor:
        ui = E.conv2d(u, sel_i, padding="valid")
        vj = E.conv2d(v, sel_j, padding="valid")
        return E.conv2d(ui * vj, mix, padding="valid")

    xc, ox = _centred(x)
    yc, oy = _centred(y)
    mxc, myc = E.windowed_mean(xc, size, stride), E.windowed_mean(yc, size, stride)
    cov = E.windowed_mean(conj_product(xc, yc), size, stride) - conj_product(mxc, myc)
    vx = E.sum_(E.windowed_mean(E.square(xc), size, stride) - E.square(mxc), axis=1)
    vy = E.sum_(E.windowed_mean(E.square(yc), size, stride) - E.square(myc), axis=1)
    mx, my = mxc + E.constant(ox), myc + E.constant(oy)
    mx2, my2 = E.sum_(E.square(mx), axis=1), E.sum_(E.square(my), axis=1)
    cov_mod = E.sqrt(E.clamp_min(E.sum_(E.square(cov), axis=1), 0.0))
    num = 4.0 * cov_mod * E.sqrt(E.clamp_min(mx2, 0.0)) * E.sqrt(E.clamp_min(my2, 0.0))
    den = E.clamp_min((vx + vy) * (mx2 + my2), cfg.eps)
    return E.mean(num / den)


def q2n(x, y, cfg: MetricConfig = MetricConfig()) -> float:
    return q2n_t(_t(x), _t(y), cfg).item()


# ---------------------------------------------------------------------------
# ERGAS and no-reference indices
# ---------------------------------------------------------------------------

def ergas_t(y: Tensor, x_ref: Tensor, ratio: int) -> Tensor:
    """``(100 / ratio) * sqrt(mean_b MSE_b / mean(ref_b)^2)``; the reference is treated as constant."""
    if y.shape != x_ref.shape:
        raise ContractViolation(f"ergas: shapes {y.shape} and {x_ref.shape} differ")
    means = x_ref.values.mean(axis=(2, 3), keepdims=True)
    bad = np.flatnonzero(np.abs(means.ravel()) < 1e-12)
    if bad.size:
        raise DegenerateReference(bad.tolist())
    mse = E.mean(E.square(y - E.detach(x_ref)), axis=(2, 3))
    return (100.0 / ratio) * E.sqrt(E.mean(mse / E.constant(means ** 2), axis=1))


def ergas(y, x_ref, ratio: int) -> float:
    return ergas_t(_t(y), _t(x_ref), ratio).item()


def d_lambda_khan(fused_down, ms, cfg: MetricConfig = MetricConfig()) -> float:
    """Spectral distortion ``1 - Q2^n`` between a reduced fused image and the MS image."""
    return 1.0 - q2n(fused_down, ms, cfg)


def d_rho_t(fused: Tensor, pan: Tensor, rho_max_values: np.ndarray, rho_max_mask: np.ndarray,
            sigma: int, eps: float = EPS) -> tuple[Tensor, float]:
    """Spatial term: mean over valid entries of ``(1 - rho) * [rho < rho_max]``.

    ``rho_max_*`` are given on the valid domain of the ``sigma`` windows,
    shape ``(B, H - sigma + 1, W - sigma + 1)``. The step mask is held
    constant. Returns the scalar and the fraction of active entries.
    """
    rho, flat_ok = local_correlation_t(pan, fused, sigma, eps)
    if rho_max_values.shape != rho.shape[1:]:
        raise ContractViolation(f"rho_max has shape {rho_max_values.shape}, expected {rho.shape[1:]}")
    valid = flat_ok[0] & rho_max_mask
    count = int(valid.sum())
    if count == 0:
        return E.constant(np.zeros((1, 1, 1, 1))), 0.0
    active = valid & (rho.values[0] < rho_max_values)
    weight = E.constant(active[None].astype(np.float64) / count)
    loss = E.sum_((1.0 - rho) * weight)
    return loss, float(active.sum()) / count


def d_rho(fused, pan, rho_max, sigma: int, eps: float = EPS) -> float:
    """No-reference spatial distortion of a full-resolution fused image.

    ``rho_max`` is a full-size :class:`CorrelationField` (or its values with an
    all-valid mask).
    """
    fused_t = _t(fused)
    pan_arr = np.asarray(getattr(pan, "values", pan), dtype=np.float64)
    if not isinstance(rho_max, CorrelationField):
        vals = np.asarray(rho_max, dtype=np.float64)
        rho_max = CorrelationField(vals, np.ones(vals.shape, dtype=bool), sigma)
    rv, rm = _crop_to_valid(rho_max, sigma)
    loss, _ = d_rho_t(fused_t, _t(pan_arr), rv, rm, sigma, eps)
    return loss.item()


def _crop_to_valid(field: CorrelationField, sigma: int):
    h, w = field.values.shape[1:]
    rows = slice(sigma // 2, sigma // 2 + h - sigma + 1)
    cols = slice(sigma // 2, sigma // 2 + w - sigma + 1)
    return field.values[:, rows, cols], field.mask[:, rows, cols]
