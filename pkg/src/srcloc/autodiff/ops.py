"""Differentiable operations.

Volumes are channels-last, ``(B, D, H, W, C)``: every pointwise and 1x1x1 op
is then a matmul over the last axis, and im2col rows are contiguous.
Convolution weights keep the conventional ``(C_out, C_in, 3, 3, 3)`` layout.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy.special import expit

from .tensor import Tensor, as_tensor, node


class ShapeError(ValueError):
    pass


def _need(t: Tensor) -> bool:
    return t.requires_grad


# --- elementwise --------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: {a.shape} vs {b.shape}")
    return node(a.values + b.values, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"sub: {a.shape} vs {b.shape}")
    return node(a.values - b.values, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}")
    av, bv = a.values, b.values
    return node(av * bv, (a, b), lambda g: (g * bv if _need(a) else None, g * av if _need(b) else None), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.values.dtype.type(c)
    return node(a.values * c, (a,), lambda g: (g * c,), "scale")


def total(a: Tensor) -> Tensor:
    shape, dt = a.shape, a.dtype
    return node(np.asarray(a.values.sum(), dtype=dt), (a,), lambda g: (np.full(shape, g, dtype=dt),), "sum")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return node(a.values.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def relu(a: Tensor) -> Tensor:
    mask = a.values > 0
    return node(np.where(mask, a.values, 0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def silu(a: Tensor) -> Tensor:
    x = a.values
    s = expit(x)
    out = x * s

    def back(g):
        return (g * (s * (1 + x * (1 - s))),)

    return node(out, (a,), back, "silu")


def concat(parts: list[Tensor], axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    axis = axis % parts[0].values.ndim
    sizes = [p.shape[axis] for p in parts]
    edges = np.cumsum([0] + sizes)

    def back(g):
        idx = [slice(None)] * g.ndim
        out = []
        for p, lo, hi in zip(parts, edges[:-1], edges[1:]):
            idx[axis] = slice(lo, hi)
            out.append(g[tuple(idx)] if p.requires_grad else None)
        return tuple(out)

    return node(np.concatenate([p.values for p in parts], axis=axis), parts, back, "concat")


# --- dense layers ---------------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ wᵀ + b`` over the last axis; ``w`` is ``(C_out, C_in)``."""
    xv, wv = x.values, w.values
    if wv.ndim != 2 or xv.shape[-1] != wv.shape[1]:
        raise ShapeError(f"linear: input {xv.shape} vs weight {wv.shape}")
    out = xv @ wv.T
    if b is not None:
        out += b.values
    parents = (x, w) if b is None else (x, w, b)

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g @ wv) if x.requires_grad else None
        gw = (g2.T @ xv.reshape(-1, xv.shape[-1])) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return node(out, parents, back, "linear")


# --- 3D convolution ---------------------------------------------------------------

def _pad1(x: np.ndarray) -> np.ndarray:
    b, d, h, w, c = x.shape
    xp = np.zeros((b, d + 2, h + 2, w + 2, c), dtype=x.dtype)
    xp[:, 1:-1, 1:-1, 1:-1] = x
    return xp


def _im2col(xp: np.ndarray, stride: int, out_dims) -> np.ndarray:
    b, _, _, _, c = xp.shape
    s0, s1, s2, s3, s4 = xp.strides
    do, ho, wo = out_dims
    view = as_strided(
        xp,
        shape=(b, do, ho, wo, 3, 3, 3, c),
        strides=(s0, stride * s1, stride * s2, stride * s3, s1, s2, s3, s4),
        writeable=False,
    )
    return view.reshape(b * do * ho * wo, 27 * c)


def conv_out_size(n: int, stride: int) -> int:
    return (n + 2 - 3) // stride + 1


_WIDE = 16  # output channels from which per-tap GEMMs are already efficient


def _flat_forward(xv: np.ndarray, wk: np.ndarray):
    """Stride-1 convolution on the flattened padded volume.

    Rows of the padded input are unrolled over (kh, kw) only, so each depth
    tap ``kd`` is one GEMM on a contiguous row range; outputs are computed at
    every padded site and the valid corner is cropped. ``wk`` is
    ``(3, 9 C_in, C_out)``.
    """
    bsz, d, h, w, ci = xv.shape
    hp, wp = h + 2, w + 2
    flat = _pad1(xv).reshape(-1, ci)
    n = flat.shape[0] - (2 * wp + 2)
    s = flat.strides[0]
    unrolled = as_strided(flat, (n, 3, 3, ci), (s, wp * s, s, flat.strides[1]),
                          writeable=False).reshape(n, 9 * ci)
    rows = flat.shape[0] - (2 * hp * wp + 2 * wp + 2)
    co, o = wk.shape[-1], hp * wp
    out = np.empty((flat.shape[0], co), dtype=xv.dtype)
    out[rows:] = 0
    if co < _WIDE:
        # skinny GEMMs are slow; do all three depth taps at once and add shifted slices
        y = unrolled @ np.concatenate(list(wk), axis=1)
        np.add(y[:rows, :co], y[o:o + rows, co:2 * co], out=out[:rows])
        out[:rows] += y[2 * o:2 * o + rows, 2 * co:]
    else:
        np.matmul(unrolled[:rows], wk[0], out=out[:rows])
        for kd in (1, 2):
            out[:rows] += unrolled[kd * o:kd * o + rows] @ wk[kd]
    return out.reshape(bsz, d + 2, hp, wp, -1)[:, :d, :h, :w], unrolled, rows


def _flat_weight_grad(unrolled: np.ndarray, gf: np.ndarray, o: int) -> np.ndarray:
    """``(3, 9 C_in, C_out)`` weight gradient from cached unrolled rows; ``o`` is the depth-tap offset."""
    rows, co = gf.shape
    if co <= _WIDE:
        g3 = np.zeros((unrolled.shape[0], 3 * co), dtype=gf.dtype)
        for k in range(3):
            g3[k * o:k * o + rows, k * co:(k + 1) * co] = gf
        return (unrolled.T @ g3).reshape(-1, 3, co).transpose(1, 0, 2)
    return np.stack([unrolled[k * o:k * o + rows].T @ gf for k in range(3)])


def _use_flat(shape, stride: int) -> bool:
    # padding overhead (n+2)^3/n^3 makes the flat path lose on tiny volumes
    return stride == 1 and min(shape[1:4]) >= 8


def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """3x3x3 cross-correlation with zero padding 1 and stride 1 or 2."""
    xv, wv = x.values, w.values
    if stride not in (1, 2):
        raise ShapeError("stride must be 1 or 2")
    if xv.ndim != 5 or wv.shape[2:] != (3, 3, 3) or wv.shape[1] != xv.shape[-1]:
        raise ShapeError(f"conv3d: input {xv.shape} vs weight {wv.shape}")
    bsz, d, h, wd, ci = xv.shape
    co = wv.shape[0]
    dims = tuple(conv_out_size(n, stride) for n in (d, h, wd))
    flat = _use_flat(xv.shape, stride)
    if flat:
        wk = wv.transpose(2, 3, 4, 1, 0).reshape(3, 9 * ci, co)
        out, cols, rows = _flat_forward(xv, wk)
        if b is not None:
            out = out + b.values
        else:
            out = np.ascontiguousarray(out)
    else:
        cols = _im2col(_pad1(xv), stride, dims)
        wmat = wv.transpose(2, 3, 4, 1, 0).reshape(27 * ci, co)
        out = cols @ wmat
        if b is not None:
            out += b.values
        out = out.reshape(bsz, *dims, co)
    parents = (x, w) if b is None else (x, w, b)

    def back_flat(g):
        hp, wp = h + 2, wd + 2
        gw = gx = None
        if w.requires_grad:
            gp = np.zeros((bsz, d + 2, hp, wp, co), dtype=g.dtype)
            gp[:, :d, :h, :wd] = g
            gf = gp.reshape(-1, co)[:rows]
            gw = _flat_weight_grad(cols, gf, hp * wp)
            gw = gw.reshape(3, 3, 3, ci, co).transpose(4, 3, 0, 1, 2)
        if x.requires_grad:
            # adjoint of a same-padded stride-1 conv: flipped kernel, channels swapped
            wflip = wv[:, :, ::-1, ::-1, ::-1].transpose(2, 3, 4, 0, 1).reshape(3, 9 * co, ci)
            gx = _flat_forward(np.ascontiguousarray(g), np.ascontiguousarray(wflip))[0]
        if b is None:
            return gx, gw
        return gx, gw, g.reshape(-1, co).sum(axis=0)

    def back_cols(g):
        g2 = g.reshape(-1, co)
        gw = gx = None
        if w.requires_grad:
            gw = (cols.T @ g2).reshape(3, 3, 3, ci, co).transpose(4, 3, 0, 1, 2)
        if x.requires_grad:
            gc = (g2 @ wmat.T).reshape(bsz, *dims, 3, 3, 3, ci)
            gxp = np.zeros((bsz, d + 2, h + 2, wd + 2, ci), dtype=g.dtype)
            span = [stride * (n - 1) + 1 for n in dims]
            for kd in range(3):
                for kh in range(3):
                    for kw in range(3):
                        gxp[:, kd:kd + span[0]:stride, kh:kh + span[1]:stride, kw:kw + span[2]:stride] += \
                            gc[:, :, :, :, kd, kh, kw]
            gx = gxp[:, 1:-1, 1:-1, 1:-1]
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return node(out, parents, back_flat if flat else back_cols, "conv3d")


# --- resampling ------------------------------------------------------------------

def upsample_nearest2x(x: Tensor) -> Tensor:
    b, d, h, w, c = x.shape
    v = x.values[:, :, None, :, None, :, None, :]
    out = np.broadcast_to(v, (b, d, 2, h, 2, w, 2, c)).reshape(b, 2 * d, 2 * h, 2 * w, c)

    def back(g):
        return (g.reshape(b, d, 2, h, 2, w, 2, c).sum(axis=(2, 4, 6)),)

    return node(out, (x,), back, "upsample2x")


def avg_pool2x(x: Tensor) -> Tensor:
    b, d, h, w, c = x.shape
    if d % 2 or h % 2 or w % 2:
        raise ShapeError(f"avg_pool2x needs even spatial dims, got {x.shape}")
    out = x.values.reshape(b, d // 2, 2, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4, 6))
    eighth = x.dtype.type(0.125)

    def back(g):
        gv = (g * eighth)[:, :, None, :, None, :, None, :]
        return (np.broadcast_to(gv, (b, d // 2, 2, h // 2, 2, w // 2, 2, c)).reshape(b, d, h, w, c),)

    return node(out, (x,), back, "avg_pool2x")


# --- normalisation ------------------------------------------------------------------

def _channel_sums(a: np.ndarray) -> np.ndarray:
    """``(B, ..., C) -> (B, C)`` sums over voxels; a GEMV beats a strided reduce by far."""
    bsz, c = a.shape[0], a.shape[-1]
    a = a.reshape(bsz, -1, c)
    return np.ones(a.shape[1], dtype=a.dtype) @ a


def _group_mean(a: np.ndarray, groups: int) -> np.ndarray:
    """Per-(sample, group) mean broadcast back to ``(B, C)``."""
    bsz, c = a.shape[0], a.shape[-1]
    s = _channel_sums(a).reshape(bsz, groups, -1).mean(axis=2, keepdims=True)
    count = a.size // (bsz * c)
    return np.repeat(s / count, c // groups, axis=2).reshape(bsz, c)


def _bcast(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape(v.shape[0], *([1] * (ndim - 2)), v.shape[1])


def group_norm(x: Tensor, groups: int, gain: Tensor, bias: Tensor, eps: float = 1e-5,
               act: str | None = None) -> Tensor:
    """Standardise each (sample, channel group) over its channels and all voxels.

    ``act="silu"`` fuses the activation that usually follows, saving one
    full-size intermediate.
    """
    xv = x.values
    c, nd = xv.shape[-1], xv.ndim
    if c % groups:
        raise ShapeError(f"{c} channels not divisible into {groups} groups")
    if act not in (None, "silu"):
        raise ValueError(f"unknown activation {act!r}")
    xc = xv - _bcast(_group_mean(xv, groups), nd)
    var = _group_mean(xc * xc, groups)
    rstd = _bcast(1.0 / np.sqrt(var + xv.dtype.type(eps)), nd)
    xhat = xc * rstd
    del xc
    pre = xhat * gain.values + bias.values
    if act == "silu":
        sig = expit(pre)
        out = pre * sig
    else:
        out = pre

    def back(g):
        if act == "silu":
            g = g * (sig * (1 + pre * (1 - sig)))
        ggain = _channel_sums(g * xhat).sum(axis=0) if gain.requires_grad else None
        gbias = _channel_sums(g).sum(axis=0) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * gain.values
            m1 = _bcast(_group_mean(gh, groups), nd)
            m2 = _bcast(_group_mean(gh * xhat, groups), nd)
            gh -= m1
            gh -= xhat * m2
            gh *= rstd
            gx = gh
        return gx, ggain, gbias

    return node(out, (x, gain, bias), back, "group_norm" if act is None else "group_norm_silu")


# --- attention -------------------------------------------------------------------------

def attention(x: Tensor, wq: Tensor, bq: Tensor, wk: Tensor, bk: Tensor, wv: Tensor, bv: Tensor,
              wo: Tensor, bo: Tensor, normed: Tensor | None = None) -> Tensor:
    """Single-head self-attention over voxel tokens, added to ``x``.

    Projections are 1x1x1 convolutions, i.e. ``(C, C)`` matrices; ``d_k = C``.
    Queries, keys and values are taken from ``normed`` when given (a
    normalised copy of ``x``); the residual always adds ``x`` itself.
    """
    shape = x.shape
    bsz, c = shape[0], shape[-1]
    src = x if normed is None else normed
    if src.shape != shape:
        raise ShapeError("attention: normed input must match x")
    R = x.values.reshape(bsz, -1, c)
    X = src.values.reshape(bsz, -1, c)
    Q = X @ wq.values.T + bq.values
    K = X @ wk.values.T + bk.values
    V = X @ wv.values.T + bv.values
    inv = X.dtype.type(1.0 / np.sqrt(c))
    S = (Q @ K.transpose(0, 2, 1)) * inv
    S -= S.max(axis=-1, keepdims=True)
    A = np.exp(S)
    A /= A.sum(axis=-1, keepdims=True)
    O = A @ V
    Y = O @ wo.values.T + bo.values
    out = (R + Y).reshape(shape)

    def back(g):
        G = g.reshape(bsz, -1, c)
        flat = lambda a: a.reshape(-1, c)  # noqa: E731
        gwo = flat(G).T @ flat(O)
        gbo = flat(G).sum(axis=0)
        gO = G @ wo.values
        gA = gO @ V.transpose(0, 2, 1)
        gV = A.transpose(0, 2, 1) @ gO
        gS = A * (gA - (gA * A).sum(axis=-1, keepdims=True)) * inv
        gQ = gS @ K
        gK = gS.transpose(0, 2, 1) @ Q
        gsrc = (gQ @ wq.values + gK @ wk.values + gV @ wv.values).reshape(shape)
        Xf = flat(X)
        grads = (flat(gQ).T @ Xf, flat(gQ).sum(axis=0),
                 flat(gK).T @ Xf, flat(gK).sum(axis=0),
                 flat(gV).T @ Xf, flat(gV).sum(axis=0),
                 gwo, gbo)
        if normed is None:
            return (g + gsrc,) + grads
        return (g,) + grads + (gsrc,)

    parents = (x, wq, bq, wk, bk, wv, bv, wo, bo) + (() if normed is None else (normed,))
    return node(out, parents, back, "attention")


# --- indexing ------------------------------------------------------------------------------

def take_voxels(x: Tensor, flat_index: np.ndarray) -> Tensor:
    """``(B, D, H, W, C)`` -> ``(B, N, C)`` at distinct flattened lattice sites."""
    shape = x.shape
    bsz, c = shape[0], shape[-1]
    idx = np.asarray(flat_index)
    out = x.values.reshape(bsz, -1, c)[:, idx]

    def back(g):
        full = np.zeros((bsz, int(np.prod(shape[1:-1])), c), dtype=g.dtype)
        full[:, idx] = g
        return (full.reshape(shape),)

    return node(out, (x,), back, "take_voxels")
