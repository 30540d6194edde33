"""The closed set of differentiable operations.

Every op takes :class:`Tensor` inputs (python scalars and arrays are promoted
to constants), computes its value with numpy, and, when any input is tracked,
records a backward rule on the shared tape. Adding an op means adding its
backward rule here and a finite-difference test in ``tests/test_engine.py``.
"""

from __future__ import annotations

import numpy as np
from scipy import sparse, special

from ..errors import ContractViolation, NumericDomainError
from .tensor import Tensor, common_tape

_SQRT_HALF = np.sqrt(0.5)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _wrap(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=like.dtype if like is not None else np.float64)
    while arr.ndim < 4:
        arr = arr[None]
    return Tensor(arr)


def _emit(op: str, inputs, values: np.ndarray, backward) -> Tensor:
    tape = common_tape(inputs)
    if tape is None:
        return Tensor(values)
    return tape.record(op, inputs, values, backward)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ContractViolation(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from exc


def constant(values, dtype=None) -> Tensor:
    arr = np.asarray(values, dtype=dtype)
    while arr.ndim < 4:
        arr = arr[None]
    return Tensor(arr)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None)
    _check_broadcast(a, b, "add")
    return _emit("add", (a, b), a.values + b.values,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None)
    _check_broadcast(a, b, "sub")
    return _emit("sub", (a, b), a.values - b.values,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None)
    _check_broadcast(a, b, "mul")

    def backward(g):
        ga = _unbroadcast(g * b.values, a.shape) if a.tracked else None
        gb = _unbroadcast(g * a.values, b.shape) if b.tracked else None
        return ga, gb

    return _emit("mul", (a, b), a.values * b.values, backward)


def div(a, b) -> Tensor:
    a, b = _wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None)
    _check_broadcast(a, b, "div")
    if np.any(b.values == 0):
        raise NumericDomainError("div: denominator contains exact zeros; clamp it first")
    out = a.values / b.values

    def backward(g):
        ga = _unbroadcast(g / b.values, a.shape) if a.tracked else None
        gb = _unbroadcast(-g * out / b.values, b.shape) if b.tracked else None
        return ga, gb

    return _emit("div", (a, b), out, backward)


def sqrt(x: Tensor) -> Tensor:
    """Square root; the derivative at exactly 0 is taken as 0."""
    if np.any(x.values < 0):
        raise NumericDomainError("sqrt: negative input")
    out = np.sqrt(x.values)

    def backward(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, 0.5 * g / safe, 0.0),)

    return _emit("sqrt", (x,), out, backward)


def square(x: Tensor) -> Tensor:
    return _emit("square", (x,), x.values * x.values, lambda g: (2.0 * x.values * g,))


def clamp_min(x: Tensor, lo: float) -> Tensor:
    keep = x.values >= lo
    return _emit("clamp_min", (x,), np.where(keep, x.values, lo).astype(x.dtype), lambda g: (g * keep,))


def abs_(x: Tensor) -> Tensor:
    """|x|; subgradient 0 at the origin."""
    return _emit("abs", (x,), np.abs(x.values), lambda g: (g * np.sign(x.values),))


def neg(x: Tensor) -> Tensor:
    return mul(x, -1.0)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _axes(axis):
    if axis is None:
        return (0, 1, 2, 3)
    if isinstance(axis, int):
        return (axis,)
    return tuple(axis)


def sum_(x: Tensor, axis=None) -> Tensor:
    axes = _axes(axis)
    out = x.values.sum(axis=axes, keepdims=True)
    return _emit("sum", (x,), out, lambda g: (np.broadcast_to(g, x.shape),))


def mean(x: Tensor, axis=None) -> Tensor:
    axes = _axes(axis)
    n = int(np.prod([x.shape[a] for a in axes]))
    out = x.values.mean(axis=axes, keepdims=True)
    return _emit("mean", (x,), out, lambda g: (np.broadcast_to(g / n, x.shape),))


def window_origins(n: int, size: int, stride: int) -> np.ndarray:
    """Top-left anchors of windows along one axis.

    Windows are placed every ``stride`` samples from 0; if the last window
    does not reach the border, one more window flush with the border is
    added so every sample is covered.
    """
    if size > n:
        raise ContractViolation(f"window {size} larger than axis length {n}")
    origins = list(range(0, n - size + 1, stride))
    if origins[-1] != n - size:
        origins.append(n - size)
    return np.asarray(origins, dtype=np.intp)


def integral_box_mean(values: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Stride-1 box means of a ``(N, C, H, W)`` array via a summed-area table.

    Fast but loses digits when values are large relative to their local
    variation; used only outside the differentiable path.
    """
    n, c, h, w = values.shape
    s = np.zeros((n, c, h + 1, w + 1), dtype=np.float64)
    np.cumsum(values, axis=2, dtype=np.float64, out=s[:, :, 1:, 1:])
    np.cumsum(s[:, :, 1:, 1:], axis=3, out=s[:, :, 1:, 1:])
    box = s[:, :, kh:, kw:] - s[:, :, :-kh, kw:] - s[:, :, kh:, :-kw] + s[:, :, :-kh, :-kw]
    return box / (kh * kw)


def _gather_sum(values: np.ndarray, origins: np.ndarray, size: int, axis: int) -> np.ndarray:
    contiguous = len(origins) == values.shape[axis] - size + 1
    key = [slice(None)] * values.ndim
    acc = None
    for d in range(size):
        if contiguous:
            key[axis] = slice(d, d + len(origins))
            part = values[tuple(key)]
        else:
            part = values.take(origins + d, axis=axis)
        acc = part.astype(np.float64, copy=True) if acc is None else acc + part
    return acc


def _scatter_sum(g: np.ndarray, origins: np.ndarray, size: int, axis: int, n: int) -> np.ndarray:
    shape = list(g.shape)
    shape[axis] = n
    out = np.zeros(shape, dtype=np.float64)
    moved = np.moveaxis(out, axis, 0)
    gm = np.moveaxis(g, axis, 0)
    for d in range(size):
        # origins are distinct, so fancy-index += does not drop duplicates
        moved[origins + d] += gm
    return out


def windowed_mean(x: Tensor, size, stride: int = 1) -> Tensor:
    """Box mean over ``size`` windows fully inside the image.

    Output element ``(r, c)`` is the mean of the window anchored at the r-th
    row origin and c-th column origin (see :func:`window_origins`). Sums are
    accumulated directly, one window offset at a time, which keeps full
    precision for variance-style differences of moments.
    """
    kh, kw = (size, size) if np.isscalar(size) else size
    _, _, h, w = x.shape
    if kh > h or kw > w:
        raise ContractViolation(f"window {kh}x{kw} larger than image {h}x{w}")
    ro, co = window_origins(h, kh, stride), window_origins(w, kw, stride)
    rows = _gather_sum(x.values, ro, kh, 2)
    box = _gather_sum(rows, co, kw, 3)
    out = (box / (kh * kw)).astype(x.dtype)

    def backward(g):
        gs = g / (kh * kw)
        gc = _scatter_sum(gs, co, kw, 3, w)
        return (_scatter_sum(gc, ro, kh, 2, h).astype(x.dtype),)

    return _emit("windowed_mean", (x,), out, backward)


# ---------------------------------------------------------------------------
# convolution and products
# ---------------------------------------------------------------------------

def _pad(values: np.ndarray, ph: int, pw: int, padding: str) -> np.ndarray:
    if ph == 0 and pw == 0:
        return values
    mode = "edge" if padding == "replicate" else "constant"
    return np.pad(values, ((0, 0), (0, 0), (ph, ph), (pw, pw)), mode=mode)


def _unpad(gp: np.ndarray, ph: int, pw: int, h: int, w: int, padding: str) -> np.ndarray:
    if padding != "replicate":
        return gp[:, :, ph:ph + h, pw:pw + w]
    rows = gp[:, :, ph:ph + h, :].copy()
    if ph:
        rows[:, :, 0, :] += gp[:, :, :ph, :].sum(axis=2)
        rows[:, :, -1, :] += gp[:, :, ph + h:, :].sum(axis=2)
    out = rows[:, :, :, pw:pw + w].copy()
    if pw:
        out[:, :, :, 0] += rows[:, :, :, :pw].sum(axis=3)
        out[:, :, :, -1] += rows[:, :, :, pw + w:].sum(axis=3)
    return out


def conv2d(x: Tensor, weight: Tensor, padding: str = "zero", depthwise: bool = False) -> Tensor:
    """Stride-1 2-D cross-correlation.

    ``weight`` is ``(out, in, kh, kw)``; with ``depthwise`` it is
    ``(channels, 1, kh, kw)`` and each channel is filtered independently.
    ``padding`` is ``"zero"`` or ``"replicate"`` (output keeps the input
    size, odd kernels only) or ``"valid"``.
    """
    x, weight = _wrap(x), _wrap(weight)
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if padding not in ("zero", "replicate", "valid"):
        raise ContractViolation(f"conv2d: unknown padding {padding!r}")
    if depthwise:
        if wcin != 1 or cout != cin:
            raise ContractViolation(f"conv2d depthwise: weight {weight.shape} does not match {cin} channels")
    elif wcin != cin:
        raise ContractViolation(f"conv2d: weight expects {wcin} input channels, input has {cin}")
    if padding == "valid":
        ph = pw = 0
        if kh > h or kw > w:
            raise ContractViolation("conv2d: kernel larger than input with valid padding")
    else:
        if kh % 2 == 0 or kw % 2 == 0:
            raise ContractViolation("conv2d: same-size padding needs odd kernel sizes")
        ph, pw = kh // 2, kw // 2
    xp = _pad(x.values, ph, pw, padding)
    ho, wo = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
    wv = weight.values
    xp = np.ascontiguousarray(xp)

    if depthwise:
        out = np.zeros((n, cin, ho, wo), dtype=np.result_type(x.dtype, weight.dtype))
        for dy in range(kh):
            for dx in range(kw):
                out += wv[None, :, 0, dy, dx, None, None] * xp[:, :, dy:dy + ho, dx:dx + wo]

        def backward(g):
            gw = gx = None
            if weight.tracked:
                gw = np.empty_like(wv)
                for dy in range(kh):
                    for dx in range(kw):
                        gw[:, 0, dy, dx] = np.einsum("nchw,nchw->c", g, xp[:, :, dy:dy + ho, dx:dx + wo])
            if x.tracked:
                gp = np.zeros_like(xp)
                for dy in range(kh):
                    for dx in range(kw):
                        gp[:, :, dy:dy + ho, dx:dx + wo] += wv[None, :, 0, dy, dx, None, None] * g
                gx = _unpad(gp, ph, pw, h, w, padding)
            return gx, gw

        return _emit("conv2d", (x, weight), out, backward)

    # Flattened-padded formulation: with the padded image stored row-major as
    # (cin, hp*wp), the window offset (dy, dx) is a contiguous slice starting
    # at dy*wp + dx. Each tap is then one matmul on a strided view; outputs are
    # produced on an (ho, wp) grid and the kw-1 wrap-around columns dropped.
    hp, wp = xp.shape[2], xp.shape[3]
    span = (ho - 1) * wp + wo
    offsets = [(dy, dx, dy * wp + dx) for dy in range(kh) for dx in range(kw)]
    dtype = np.result_type(x.dtype, weight.dtype)
    flat = xp.reshape(n, cin, hp * wp)
    taps = np.ascontiguousarray(wv.transpose(2, 3, 0, 1))
    taps_t = np.ascontiguousarray(wv.transpose(2, 3, 1, 0))

    out_grid = np.zeros((n, cout, ho * wp), dtype=dtype)
    for b in range(n):
        for dy, dx, off in offsets:
            out_grid[b, :, :span] += taps[dy, dx] @ flat[b, :, off:off + span]
    out = np.ascontiguousarray(out_grid.reshape(n, cout, ho, wp)[:, :, :, :wo])
    del out_grid

    def backward(g):
        gg = np.zeros((n, cout, ho, wp), dtype=g.dtype)
        gg[:, :, :, :wo] = g
        gg = np.ascontiguousarray(gg.reshape(n, cout, ho * wp)[:, :, :span])
        gw = gx = None
        if weight.tracked:
            gw = np.zeros_like(wv)
            for b in range(n):
                for dy, dx, off in offsets:
                    gw[:, :, dy, dx] += gg[b] @ flat[b, :, off:off + span].T
        if x.tracked:
            gflat = np.zeros((n, cin, hp * wp), dtype=dtype)
            for b in range(n):
                for dy, dx, off in offsets:
                    gflat[b, :, off:off + span] += taps_t[dy, dx] @ gg[b]
            gx = _unpad(gflat.reshape(n, cin, hp, wp), ph, pw, h, w, padding)
        return gx, gw

    return _emit("conv2d", (x, weight), out, backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, broadcasting the leading two."""
    a, b = _wrap(a), _wrap(b)
    if a.shape[3] != b.shape[2]:
        raise ContractViolation(f"matmul: inner dimensions differ ({a.shape} @ {b.shape})")
    out = np.matmul(a.values, b.values)

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.values, -1, -2)), a.shape) if a.tracked else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.values, -1, -2), g), b.shape) if b.tracked else None
        return ga, gb

    return _emit("matmul", (a, b), out, backward)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    """max(x, 0); the subgradient at 0 is 0."""
    active = x.values > 0
    return _emit("relu", (x,), np.where(active, x.values, 0).astype(x.dtype), lambda g: (g * active,))


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    v = x.values
    cdf = 0.5 * (1.0 + special.erf(v * _SQRT_HALF))
    out = (v * cdf).astype(x.dtype)

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * v * v)
        return (g * (cdf + v * pdf),)

    return _emit("gelu", (x,), out, backward)


def sigmoid(x: Tensor) -> Tensor:
    s = special.expit(x.values)
    return _emit("sigmoid", (x,), s, lambda g: (g * s * (1.0 - s),))


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def global_avg_pool(x: Tensor) -> Tensor:
    return mean(x, axis=(2, 3))


def global_max_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    flat = x.values.reshape(n, c, h * w)
    idx = flat.argmax(axis=2)
    out = np.take_along_axis(flat, idx[..., None], axis=2).reshape(n, c, 1, 1)

    def backward(g):
        gx = np.zeros_like(flat)
        np.put_along_axis(gx, idx[..., None], g.reshape(n, c, 1), axis=2)
        return (gx.reshape(x.shape),)

    return _emit("global_max_pool", (x,), out, backward)


def channel_avg(x: Tensor) -> Tensor:
    return mean(x, axis=1)


def channel_max(x: Tensor) -> Tensor:
    idx = x.values.argmax(axis=1)[:, None]
    out = np.take_along_axis(x.values, idx, axis=1)

    def backward(g):
        gx = np.zeros_like(x.values)
        np.put_along_axis(gx, idx, g, axis=1)
        return (gx,)

    return _emit("channel_max", (x,), out, backward)


# ---------------------------------------------------------------------------
# structural
# ---------------------------------------------------------------------------

def concat_channels(tensors) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    base = tensors[0].shape
    for t in tensors[1:]:
        if t.shape[0] != base[0] or t.shape[2:] != base[2:]:
            raise ContractViolation(f"concat_channels: incompatible shapes {base} and {t.shape}")
    out = np.concatenate([t.values for t in tensors], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])

    def backward(g):
        return tuple(g[:, lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _emit("concat_channels", tuple(tensors), out, backward)


def crop(x: Tensor, channels: slice | None = None, rows: slice | None = None, cols: slice | None = None) -> Tensor:
    """Slice channels/rows/columns; slices may carry a step (decimation)."""
    key = (slice(None), channels or slice(None), rows or slice(None), cols or slice(None))
    out = x.values[key]
    if min(out.shape) < 1:
        raise ContractViolation(f"crop: empty result from shape {x.shape}")

    def backward(g):
        gx = np.zeros_like(x.values)
        gx[key] = g
        return (gx,)

    return _emit("crop", (x,), np.ascontiguousarray(out), backward)


def shift_matrix(n: int, offset: float) -> sparse.csr_matrix:
    """Linear-interpolation resampling matrix: ``(S @ v)[i] = v(i + offset)``.

    Sample positions outside ``[0, n-1]`` are clamped to the border sample.
    """
    pos = np.arange(n) + offset
    i0 = np.floor(pos)
    frac = pos - i0
    i0 = i0.astype(np.intp)
    lo, hi = np.clip(i0, 0, n - 1), np.clip(i0 + 1, 0, n - 1)
    rows = np.concatenate([np.arange(n), np.arange(n)])
    cols = np.concatenate([lo, hi])
    vals = np.concatenate([1.0 - frac, frac])
    keep = vals != 0
    return sparse.csr_matrix((vals[keep], (rows[keep], cols[keep])), shape=(n, n))


def _apply_axis(mat: sparse.csr_matrix, arr: np.ndarray, axis: int) -> np.ndarray:
    moved = np.moveaxis(arr, axis, 0)
    shape = moved.shape
    res = mat @ moved.reshape(shape[0], -1)
    return np.moveaxis(np.asarray(res, dtype=arr.dtype).reshape(shape), 0, axis)


def spatial_shift(x: Tensor, dx: float, dy: float) -> Tensor:
    """Resample every channel at ``(row + dy, col + dx)`` with bilinear weights."""
    sx = shift_matrix(x.shape[3], dx) if dx else None
    sy = shift_matrix(x.shape[2], dy) if dy else None
    out = x.values
    if sx is not None:
        out = _apply_axis(sx, out, 3)
    if sy is not None:
        out = _apply_axis(sy, out, 2)

    def backward(g):
        if sy is not None:
            g = _apply_axis(sy.T.tocsr(), g, 2)
        if sx is not None:
            g = _apply_axis(sx.T.tocsr(), g, 3)
        return (g,)

    return _emit("spatial_shift", (x,), np.array(out, copy=out is x.values), backward)


def detach(x: Tensor) -> Tensor:
    return Tensor(x.values)


def cast(x: Tensor, dtype) -> Tensor:
    """Change precision; the gradient is cast back to the input precision."""
    dtype = np.dtype(dtype)
    if x.dtype == dtype:
        return x
    return _emit("cast", (x,), x.values.astype(dtype), lambda g: (g.astype(x.dtype),))


# operator sugar
Tensor.__add__ = lambda self, o: add(self, o)
Tensor.__radd__ = lambda self, o: add(o, self)
Tensor.__sub__ = lambda self, o: sub(self, o)
Tensor.__rsub__ = lambda self, o: sub(o, self)
Tensor.__mul__ = lambda self, o: mul(self, o)
Tensor.__rmul__ = lambda self, o: mul(o, self)
Tensor.__truediv__ = lambda self, o: div(self, o)
Tensor.__rtruediv__ = lambda self, o: div(o, self)
Tensor.__neg__ = lambda self: neg(self)
