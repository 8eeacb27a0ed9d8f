"""Differentiable image operators over N x C x H x W tensors."""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import ShapeError, Tensor, note_branch


def _out_extent(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _check_conv_args(x: Tensor, k: int, stride: int, pad: int, op: str) -> tuple[int, int]:
    if x.ndim != 4:
        raise ShapeError(f"{op}: expected N x C x H x W input, got shape {x.shape}")
    if k < 1 or stride < 1 or pad < 0:
        raise ValueError(f"{op}: need K >= 1, stride >= 1, pad >= 0 (got K={k}, stride={stride}, pad={pad})")
    ho = _out_extent(x.shape[2], k, stride, pad)
    wo = _out_extent(x.shape[3], k, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"{op}: non-positive output extent {ho}x{wo} for input {x.shape[2:]} K={k} pad={pad}")
    return ho, wo


def _pad(a: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return a
    return np.pad(a, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _bias_grad(g: np.ndarray) -> np.ndarray:
    return g.sum(axis=(0, 2, 3))


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation with zero padding.

    x: N x Ci x H x W, w: Co x Ci x K x K, b: Co or None.
    """
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d: weight must be Co x Ci x K x K, got {w.shape}")
    co, ci, k, _ = w.shape
    if x.ndim == 4 and x.shape[1] != ci:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels but weight expects {ci} (weight shape {w.shape})")
    ho, wo = _check_conv_args(x, k, stride, pad, "conv2d")
    if b is not None and b.shape != (co,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({co},)")
    n, _, h, wd = x.shape
    xd, wmat = x.data, w.data.reshape(co, ci * k * k)
    parents = (x, w) if b is None else (x, w, b)

    if k == 1 and stride == 1 and pad == 0:
        xr = xd.reshape(n, ci, h * wd)
        out = np.matmul(wmat, xr)
        if b is not None:
            out += b.data[None, :, None]

        def backward(g):
            gr = g.reshape(n, co, h * wd)
            gx = np.matmul(wmat.T, gr).reshape(x.shape) if x.requires_grad else None
            gw = np.tensordot(gr, xr, axes=([0, 2], [0, 2])).reshape(w.shape)
            if b is None:
                return gx, gw
            return gx, gw, gr.sum(axis=(0, 2))

        return Tensor.from_op(out.reshape(n, co, h, wd), parents, backward, "conv2d")

    xp = _pad(xd, pad)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # N x Ho x Wo x (Ci K K)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, ho, wo, ci * k * k)
    out = cols @ wmat.T
    if b is not None:
        out += b.data
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def backward(g):
        gt = np.ascontiguousarray(g.transpose(0, 2, 3, 1))  # N Ho Wo Co
        gw = np.tensordot(gt, cols, axes=([0, 1, 2], [0, 1, 2])).reshape(w.shape)
        gx = None
        if x.requires_grad:
            dcols = (gt @ wmat).reshape(n, ho, wo, ci, k, k)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[..., i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
        if b is None:
            return gx, gw
        return gx, gw, _bias_grad(g)

    return Tensor.from_op(out, parents, backward, "conv2d")


def depthwise_conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Per-channel spatial filtering: output channel c sees only input channel c.

    x: N x C x H x W, w: C x 1 x K x K, b: C or None.
    """
    if w.ndim != 4 or w.shape[1] != 1 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"depthwise_conv2d: weight must be C x 1 x K x K, got {w.shape}")
    c, _, k, _ = w.shape
    if x.ndim == 4 and x.shape[1] != c:
        raise ShapeError(f"depthwise_conv2d: input has {x.shape[1]} channels, weight has {c}")
    ho, wo = _check_conv_args(x, k, stride, pad, "depthwise_conv2d")
    if b is not None and b.shape != (c,):
        raise ShapeError(f"depthwise_conv2d: bias shape {b.shape} != ({c},)")
    n, _, h, wd = x.shape
    xp = _pad(x.data, pad)
    wk = w.data[:, 0]
    out = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            out += xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] * wk[None, :, i, j, None, None]
    if b is not None:
        out += b.data[None, :, None, None]
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gw = np.empty_like(w.data)
        gxp = np.zeros_like(xp) if x.requires_grad else None
        for i in range(k):
            for j in range(k):
                sl = (slice(None), slice(None), slice(i, i + stride * ho, stride), slice(j, j + stride * wo, stride))
                gw[:, 0, i, j] = np.einsum("nchw,nchw->c", g, xp[sl])
                if gxp is not None:
                    gxp[sl] += g * wk[None, :, i, j, None, None]
        gx = None
        if gxp is not None:
            gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
        if b is None:
            return gx, gw
        return gx, gw, _bias_grad(g)

    return Tensor.from_op(out, parents, backward, "depthwise_conv2d")


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalisation; updates ``running_mean``/``running_var`` in place when training."""
    if x.ndim != 4:
        raise ShapeError(f"batch_norm: expected N x C x H x W, got {x.shape}")
    if eps <= 0:
        raise ValueError("batch_norm: eps must be positive")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: gamma/beta must have shape ({c},)")
    m = n * h * w
    xd = x.data
    dt = x.dtype
    if training:
        if m < 2:
            raise ValueError(f"batch_norm: train mode needs N*H*W >= 2 for a defined variance, got {m}")
        mean = xd.mean(axis=(0, 2, 3))
        xc = xd - mean[None, :, None, None]
        var = (xc * xc).mean(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean.astype(running_mean.dtype)
        running_var *= 1.0 - momentum
        running_var += momentum * (var * (m / (m - 1))).astype(running_var.dtype)
    else:
        mean = running_mean.astype(dt)
        var = running_var.astype(dt)
        xc = xd - mean[None, :, None, None]
    inv = (1.0 / np.sqrt(var + dt.type(eps))).astype(dt)
    xhat = xc * inv[None, :, None, None]
    gd = gamma.data
    out = xhat * gd[None, :, None, None] + beta.data[None, :, None, None]

    def backward(g):
        gbeta = g.sum(axis=(0, 2, 3))
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gxhat = g * gd[None, :, None, None]
        if training:
            gx = (inv / m)[None, :, None, None] * (
                m * gxhat - gxhat.sum(axis=(0, 2, 3))[None, :, None, None] - xhat * (gxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
            )
        else:
            gx = gxhat * inv[None, :, None, None]
        return gx, ggamma, gbeta

    return Tensor.from_op(out, (x, gamma, beta), backward, "batch_norm")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    note_branch(mask)
    return Tensor.from_op(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def relu6(x: Tensor) -> Tensor:
    mask = (x.data > 0) & (x.data < 6)
    note_branch(mask)
    return Tensor.from_op(np.clip(x.data, 0, 6), (x,), lambda g: (g * mask,), "relu6")


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "relu6":
        return relu6(x)
    raise ValueError(f"unknown activation {kind!r}")


# -- separable linear resampling ----------------------------------------------


@lru_cache(maxsize=256)
def _pool_matrix(size: int, out: int) -> np.ndarray:
    m = np.zeros((out, size))
    for i in range(out):
        lo = (i * size) // out
        hi = -((-(i + 1) * size) // out)
        m[i, lo:hi] = 1.0 / (hi - lo)
    m.setflags(write=False)
    return m


@lru_cache(maxsize=256)
def resize_matrix(size: int, out: int) -> np.ndarray:
    """Row operator of 1-D linear interpolation with half-pixel centres and edge clamping."""
    m = np.zeros((out, size))
    src = np.clip((np.arange(out) + 0.5) * size / out - 0.5, 0, size - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, size - 1)
    frac = src - i0
    rows = np.arange(out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    m.setflags(write=False)
    return m


def _separable(x: Tensor, ry: np.ndarray, rx: np.ndarray, op: str) -> Tensor:
    ry = ry.astype(x.dtype)
    rx = rx.astype(x.dtype)
    # (ry @ x) @ rx.T, applied per (n, c) plane
    out = np.matmul(np.matmul(ry, x.data), rx.T)

    def backward(g):
        return (np.matmul(np.matmul(ry.T, g), rx),)

    return Tensor.from_op(out, (x,), backward, op)


def adaptive_avg_pool2d(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Average over windows [floor(i*H/out_h), ceil((i+1)*H/out_h)) and likewise for columns."""
    if x.ndim != 4:
        raise ShapeError(f"adaptive_avg_pool2d: expected N x C x H x W, got {x.shape}")
    h, w = x.shape[2:]
    if not (1 <= out_h <= h and 1 <= out_w <= w):
        raise ShapeError(f"adaptive_avg_pool2d: output {out_h}x{out_w} must lie within input {h}x{w}")
    return _separable(x, _pool_matrix(h, out_h), _pool_matrix(w, out_w), "adaptive_avg_pool2d")


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"bilinear_resize: expected N x C x H x W, got {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_resize: output extents must be >= 1, got {out_h}x{out_w}")
    h, w = x.shape[2:]
    if (h, w) == (out_h, out_w):
        return _separable(x, np.eye(h), np.eye(w), "bilinear_resize")
    return _separable(x, resize_matrix(h, out_h), resize_matrix(w, out_w), "bilinear_resize")


# -- point operators ------------------------------------------------------------


def _check_coords(coords: np.ndarray, n: int, op: str) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 3 or coords.shape[0] != n or coords.shape[2] != 2:
        raise ShapeError(f"{op}: coords must be N x P x 2 with N={n}, got {coords.shape}")
    if coords.size and (not np.all(np.isfinite(coords)) or coords.min() < 0.0 or coords.max() > 1.0):
        raise ValueError(f"{op}: normalized coordinates must lie in [0, 1]")
    return coords


def _corners(coords: np.ndarray, h: int, w: int):
    px = np.clip(coords[..., 0] * w - 0.5, 0, w - 1)
    py = np.clip(coords[..., 1] * h - 0.5, 0, h - 1)
    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = px - x0
    fy = py - y0
    idx = (y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1)
    wts = ((1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx)
    return idx, wts


def sample_points_bilinear(x: Tensor, coords: np.ndarray) -> Tensor:
    """Bilinear read-out at normalized (u, v) points; returns N x C x P.

    u runs along width and v along height; pixel (i, j) has its centre at
    ((j + 0.5) / W, (i + 0.5) / H).
    """
    if x.ndim != 4:
        raise ShapeError(f"sample_points_bilinear: expected N x C x H x W, got {x.shape}")
    n, c, h, w = x.shape
    coords = _check_coords(coords, n, "sample_points_bilinear")
    p = coords.shape[1]
    flat = x.data.reshape(n, c, h * w)
    idx, wts = _corners(coords, h, w)
    out = np.zeros((n, c, p), dtype=x.dtype)
    for ix, wt in zip(idx, wts):
        out += np.take_along_axis(flat, ix[:, None, :], axis=2) * wt[:, None, :].astype(x.dtype)

    def backward(g):
        gflat = np.zeros((n, c, h * w), dtype=x.dtype)
        for ix, wt in zip(idx, wts):
            contrib = g * wt[:, None, :].astype(x.dtype)
            for bi in range(n):
                np.add.at(gflat[bi], (slice(None), ix[bi]), contrib[bi])
        return (gflat.reshape(x.shape),)

    return Tensor.from_op(out, (x,), backward, "sample_points_bilinear")


def point_indices(coords: np.ndarray, h: int, w: int) -> np.ndarray:
    """Integer pixel indices (row-major flat) of normalized coordinates, rounding half up."""
    ix = np.floor(coords[..., 0] * w).astype(np.int64)
    iy = np.floor(coords[..., 1] * h).astype(np.int64)
    if ix.size and (ix.min() < 0 or ix.max() >= w or iy.min() < 0 or iy.max() >= h):
        raise IndexError(f"point coordinates map outside the {h}x{w} pixel grid")
    return iy * w + ix


def _last_writers(lin: np.ndarray) -> np.ndarray:
    """Positions in ``lin`` that survive last-writer-wins replay, in ascending order."""
    rev = lin[::-1]
    _, first_in_rev = np.unique(rev, return_index=True)
    return np.sort(len(lin) - 1 - first_in_rev)


def scatter_points(dst: Tensor, coords: np.ndarray, values: Tensor) -> Tensor:
    """Replace the pixels addressed by ``coords`` with ``values`` (N x C x P).

    Duplicate coordinates resolve to the later point.  Every other element of
    ``dst`` is passed through unchanged.
    """
    if dst.ndim != 4:
        raise ShapeError(f"scatter_points: expected N x C x H x W destination, got {dst.shape}")
    n, c, h, w = dst.shape
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 3 or coords.shape[0] != n or coords.shape[2] != 2:
        raise ShapeError(f"scatter_points: coords must be N x P x 2, got {coords.shape}")
    p = coords.shape[1]
    if values.shape != (n, c, p):
        raise ShapeError(f"scatter_points: values shape {values.shape} != {(n, c, p)}")
    lin = point_indices(coords, h, w)
    winners = [_last_writers(lin[bi]) for bi in range(n)]
    out = dst.data.copy().reshape(n, c, h * w)
    for bi in range(n):
        keep = winners[bi]
        out[bi][:, lin[bi][keep]] = values.data[bi][:, keep]

    def backward(g):
        gf = g.reshape(n, c, h * w)
        gdst = gf.copy()
        gval = np.zeros((n, c, p), dtype=g.dtype)
        for bi in range(n):
            keep = winners[bi]
            gval[bi][:, keep] = gf[bi][:, lin[bi][keep]]
            gdst[bi][:, lin[bi][keep]] = 0
        return gdst.reshape(dst.shape), gval

    return Tensor.from_op(out.reshape(dst.shape), (dst, values), backward, "scatter_points")


# -- channel-wise normalisers ---------------------------------------------------


def softmax_channel(x: Tensor) -> Tensor:
    if x.ndim < 2 or x.shape[1] < 2:
        raise ShapeError(f"softmax_channel: need at least two channels, got shape {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return Tensor.from_op(s, (x,), backward, "softmax_channel")


def log_softmax_channel(x: Tensor) -> Tensor:
    if x.ndim < 2 or x.shape[1] < 2:
        raise ShapeError(f"log_softmax_channel: need at least two channels, got shape {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def backward(g):
        return (g - s * g.sum(axis=1, keepdims=True),)

    return Tensor.from_op(out, (x,), backward, "log_softmax_channel")


def take_channel(x: Tensor, index: np.ndarray) -> Tensor:
    """out[n, ...] = x[n, index[n, ...], ...]; ``index`` has x's shape without the channel axis."""
    index = np.asarray(index)
    expect = (x.shape[0],) + x.shape[2:]
    if index.shape != expect:
        raise ShapeError(f"take_channel: index shape {index.shape} != {expect}")
    idx = index[:, None].astype(np.int64)
    out = np.take_along_axis(x.data, idx, axis=1)[:, 0]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, g[:, None], axis=1)
        return (gx,)

    return Tensor.from_op(out, (x,), backward, "take_channel")
