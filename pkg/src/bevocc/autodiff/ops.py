"""Differentiable primitives.

Each function takes tensors (or array-likes, which are treated as
constants) and returns a tensor recorded on the graph when needed.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeError
from .tensor import Tensor, as_tensor, record


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra < 0:
        raise ShapeError(f"cannot reduce {grad.shape} to {shape}")
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"shapes {a.shape} and {b.shape} do not broadcast") from exc


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return record(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return record(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return record(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    out = a.data / b.data
    return record(
        "div",
        out,
        (a, b),
        lambda g: (unbroadcast(g / b.data, a.shape), unbroadcast(-g * out / b.data, b.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return record("neg", -a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return record("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return record("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def sigmoid_array(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softplus_array(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    return record("softplus", softplus_array(a.data), (a,), lambda g: (g * sigmoid_array(a.data),))


def silu(a) -> Tensor:
    a = as_tensor(a)
    s = sigmoid_array(a.data)
    return record("silu", a.data * s, (a,), lambda g: (g * s * (1.0 + a.data * (1.0 - s)),))


_PHI_EULER = 1e-6
_PHI_SERIES = 1e-3


def expm1_ratio_array(z: np.ndarray) -> np.ndarray:
    """(exp(z) - 1) / z, equal to 1 when |z| < 1e-6."""
    small = np.abs(z) < _PHI_EULER
    safe = np.where(small, 1.0, z)
    return np.where(small, 1.0, np.expm1(safe) / safe)


def expm1_ratio(a) -> Tensor:
    """Differentiable ``(exp(z) - 1) / z`` used by zero-order-hold discretization."""
    a = as_tensor(a)
    z = a.data
    out = expm1_ratio_array(z)

    def bwd(g):
        small = np.abs(z) < _PHI_SERIES
        safe = np.where(small, 1.0, z)
        exact = (np.exp(safe) - out) / safe
        series = 0.5 + z / 3.0 + z * z / 8.0
        return (g * np.where(small, series, exact),)

    return record("expm1_ratio", out, (a,), bwd)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return record("matmul", out, (a, b), bwd)


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation on ``[N, C_in, H, W]`` with weight ``[C_out, C_in, kh, kw]``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects rank-4 input and weight, got {x.shape}, {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input {cin}, weight {wcin}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise ShapeError("conv2d kernel larger than padded input")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = cols.shape[2], cols.shape[3]
    out = np.tensordot(cols, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    inputs = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[None, :, None, None]
        inputs.append(bias)
    out = np.ascontiguousarray(out)

    def bwd(g):
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        gcols = np.tensordot(g, weight.data, axes=([1], [0]))  # [N, Ho, Wo, Cin, kh, kw]
        gxp = np.zeros((n, cin, hp, wp), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return record("conv2d", out, inputs, bwd)


# ---------------------------------------------------------------- normalization


def softmax_array(x: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    s = softmax_array(a.data, axis)
    return record(
        "softmax", s, (a,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),)
    )


def layer_norm(a, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalize to zero mean and unit variance along ``axis`` (no affine part)."""
    a = as_tensor(a)
    mu = a.data.mean(axis=axis, keepdims=True)
    xc = a.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=axis, keepdims=True) + eps)
    xhat = xc * inv

    def bwd(g):
        gm = g.mean(axis=axis, keepdims=True)
        gx = (g * xhat).mean(axis=axis, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return record("layer_norm", xhat, (a,), bwd)


def cross_entropy(logits, target, weight=None) -> Tensor:
    """Weighted mean of -log softmax(logits)[target] over rows of ``[N, K]`` logits."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [N, K] logits, got {logits.shape}")
    target = np.asarray(target, dtype=np.int64)
    n, k = logits.shape
    if target.shape != (n,):
        raise ShapeError(f"target shape {target.shape} != ({n},)")
    w = np.ones(n) if weight is None else np.asarray(weight, dtype=np.float64)
    total = w.sum()
    if total <= 0:
        raise ShapeError("cross_entropy needs a positive total weight")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = -(w * logp[rows, target]).sum() / total

    def bwd(g):
        p = np.exp(logp)
        p[rows, target] -= 1.0
        return (g * p * (w / total)[:, None],)

    return record("cross_entropy", np.asarray(loss), (logits,), bwd)


# ---------------------------------------------------------------- sampling


def gather_bilinear(x, py, px, padding: str = "border") -> Tensor:
    """Bilinearly sample ``x [N, C, H, W]`` at fractional positions.

    ``py``/``px`` have shape ``[N, *P]`` in cell units (row, column).
    ``padding="border"`` clamps coordinates into the map (gradients w.r.t.
    clamped coordinates are zero); ``padding="zeros"`` treats everything
    outside as 0.  Returns ``[N, C, *P]``.
    """
    x, py, px = as_tensor(x), as_tensor(py), as_tensor(px)
    if x.ndim != 4:
        raise ShapeError(f"gather_bilinear expects [N, C, H, W], got {x.shape}")
    n, c, h, w = x.shape
    if py.shape != px.shape or py.shape[0] != n:
        raise ShapeError(f"position shapes {py.shape}, {px.shape} do not match batch {n}")
    pshape = py.shape[1:]
    yy = py.data.reshape(n, -1)
    xx = px.data.reshape(n, -1)
    if padding == "border":
        gate_y = ((yy >= 0) & (yy <= h - 1)).astype(x.dtype)
        gate_x = ((xx >= 0) & (xx <= w - 1)).astype(x.dtype)
        yc = np.clip(yy, 0, h - 1)
        xc = np.clip(xx, 0, w - 1)
        y0 = np.minimum(np.floor(yc), max(h - 2, 0)).astype(np.int64)
        x0 = np.minimum(np.floor(xc), max(w - 2, 0)).astype(np.int64)
        wy = yc - y0
        wx = xc - x0
        y1 = np.minimum(y0 + 1, h - 1)
        x1 = np.minimum(x0 + 1, w - 1)
        vy0 = vy1 = vx0 = vx1 = np.ones_like(yy)
    elif padding == "zeros":
        gate_y = gate_x = 1.0
        y0 = np.floor(yy).astype(np.int64)
        x0 = np.floor(xx).astype(np.int64)
        wy = yy - y0
        wx = xx - x0
        y1 = y0 + 1
        x1 = x0 + 1
        vy0 = ((y0 >= 0) & (y0 < h)).astype(x.dtype)
        vy1 = ((y1 >= 0) & (y1 < h)).astype(x.dtype)
        vx0 = ((x0 >= 0) & (x0 < w)).astype(x.dtype)
        vx1 = ((x1 >= 0) & (x1 < w)).astype(x.dtype)
        y0, y1 = np.clip(y0, 0, h - 1), np.clip(y1, 0, h - 1)
        x0, x1 = np.clip(x0, 0, w - 1), np.clip(x1, 0, w - 1)
    else:
        raise ValueError(f"unknown padding {padding!r}")

    xt = np.moveaxis(x.data, 1, -1)  # [N, H, W, C]
    nidx = np.arange(n)[:, None]
    corners = [
        (y0, x0, (1 - wy) * (1 - wx) * vy0 * vx0, vy0 * vx0),
        (y0, x1, (1 - wy) * wx * vy0 * vx1, vy0 * vx1),
        (y1, x0, wy * (1 - wx) * vy1 * vx0, vy1 * vx0),
        (y1, x1, wy * wx * vy1 * vx1, vy1 * vx1),
    ]
    vals = [xt[nidx, yk, xk] for yk, xk, _, _ in corners]  # each [N, P, C]
    out = sum(v * cw[..., None] for v, (_, _, cw, _) in zip(vals, corners))
    out = np.moveaxis(out, -1, 1).reshape((n, c) + pshape)

    def bwd(g):
        gt = np.moveaxis(g.reshape(n, c, -1), 1, -1)  # [N, P, C]
        gx = np.zeros_like(xt)
        for yk, xk, cw, _ in corners:
            np.add.at(gx, (nidx, yk, xk), gt * cw[..., None])
        v00, v01, v10, v11 = (v * valid[..., None] for v, (_, _, _, valid) in zip(vals, corners))
        dy = ((1 - wx)[..., None] * (v10 - v00) + wx[..., None] * (v11 - v01)) * gt
        dx = ((1 - wy)[..., None] * (v01 - v00) + wy[..., None] * (v11 - v10)) * gt
        gpy = (dy.sum(-1) * gate_y).reshape(py.shape)
        gpx = (dx.sum(-1) * gate_x).reshape(px.shape)
        return np.moveaxis(gx, -1, 1), gpy, gpx

    return record("gather_bilinear", out, (x, py, px), bwd)


def scatter_add(src, index, size: int) -> Tensor:
    """Sum ``src[..., p]`` into ``out[..., index[p]]`` with ``out`` of last extent ``size``.

    Contributions are accumulated in index order, so the result is
    deterministic.
    """
    src = as_tensor(src)
    index = np.asarray(index, dtype=np.int64)
    if index.shape != src.shape[-1:]:
        raise ShapeError(f"index shape {index.shape} vs source {src.shape}")
    if index.size and (index.min() < 0 or index.max() >= size):
        raise ShapeError("scatter index out of range")
    lead = src.shape[:-1]
    rows = int(np.prod(lead, dtype=np.int64))
    flat = src.data.reshape(rows, src.shape[-1])
    out = np.zeros((size, rows), dtype=src.dtype)
    np.add.at(out, index, flat.T)
    out = out.T.reshape(lead + (size,))
    return record("scatter_add", out, (src,), lambda g: (g[..., index],))


# ---------------------------------------------------------------- shape


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    return record("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def permute(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"invalid permutation {axes} for rank {a.ndim}")
    inv = tuple(np.argsort(axes))
    return record("permute", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]

    def bwd(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return record("getitem", np.array(out, copy=True), (a,), bwd)


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return record("concat", out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return record("reduce_sum", np.asarray(out), (a,), bwd)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return reduce_sum(a, axis, keepdims) * (1.0 / count)


def upsample_nearest(a, factor: int) -> Tensor:
    """Repeat the last two axes ``factor`` times."""
    a = as_tensor(a)
    if factor == 1:
        return a
    h, w = a.shape[-2:]
    rows = np.repeat(np.arange(h), factor)
    cols = np.repeat(np.arange(w), factor)
    return getitem(a, (..., rows[:, None], cols[None, :]))
