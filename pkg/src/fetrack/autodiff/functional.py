"""Network operators on :class:`Tensor`: convolution, dense layers, normalisation, pooling."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import BoxError, ShapeError, StateError
from .tensor import Tensor, as_tensor


def _pads(padding):
    if isinstance(padding, (int, np.integer)):
        p = int(padding)
        return p, p, p, p
    if len(padding) == 2:
        return padding[0], padding[0], padding[1], padding[1]
    return tuple(int(v) for v in padding)


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation of ``x`` (N, C, H, W) with ``weight`` (O, C, kh, kw).

    ``padding`` is an int, ``(ph, pw)``, or ``(top, bottom, left, right)``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {weight.shape}")
    N, C, H, W = x.shape
    O, Cw, kh, kw = weight.shape
    if C != Cw:
        raise ShapeError(f"conv2d: input has {C} channels, kernel expects {Cw}")
    if stride < 1:
        raise ShapeError("conv2d: stride must be >= 1")
    pt, pb, pl, pr = _pads(padding)
    Ho = (H + pt + pb - kh) // stride + 1
    Wo = (W + pl + pr - kw) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {H}x{W}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if (pt or pb or pl or pr) else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    wd = weight.data
    out = np.tensordot(win, wd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (O,):
            raise ShapeError(f"conv2d: bias shape {bias.shape}, expected ({O},)")
        out = out + bias.data[None, :, None, None]
        parents.append(bias)
    out = np.ascontiguousarray(out)

    def backward(g):
        gx = gw = None
        if x.requires_grad:
            gcol = np.tensordot(g, wd, axes=([1], [0]))  # N, Ho, Wo, C, kh, kw
            gxp = np.zeros(xp.shape)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += gcol[..., i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pt:pt + H, pl:pl + W]
        if weight.requires_grad:
            gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return Tensor._node(out, parents, backward)


def linear(x, weight, bias=None):
    """``x`` (N, D) times ``weight`` (O, D) transposed, plus ``bias`` (O,)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: cannot apply {weight.shape} weights to {x.shape} input")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear: bias shape {bias.shape}")
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        grads = [g @ wd, g.T @ xd]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return Tensor._node(out, parents, backward)


class BNState:
    """Running statistics of one batch-norm layer."""

    def __init__(self, channels, momentum=0.1, eps=1e-5):
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps


def batch_norm(x, gamma, beta, state: BNState | None, training: bool, eps=1e-5, momentum=0.1):
    """Per-channel normalisation over every axis but 1.

    Training mode uses batch statistics and, when ``state`` is given, folds them
    into the running averages (unbiased variance, PyTorch convention).
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batch_norm: gamma/beta must have shape ({C},)")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, C) + (1,) * (x.ndim - 2)
    if state is not None:
        eps, momentum = state.eps, state.momentum
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if state is not None:
            m = x.data.size // C
            unbiased = var * m / (m - 1) if m > 1 else var
            state.running_mean = (1 - momentum) * state.running_mean + momentum * mu
            state.running_var = (1 - momentum) * state.running_var + momentum * unbiased
    else:
        if state is None:
            raise StateError("batch_norm in eval mode needs running statistics")
        mu, var = state.running_mean, state.running_var
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(bshape)) * invstd.reshape(bshape)
    gd = gamma.data.reshape(bshape)
    out = xhat * gd + beta.data.reshape(bshape)

    def backward(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        dxhat = g * gd
        if training:
            m = x.data.size // C
            gx = (invstd.reshape(bshape) / m) * (
                m * dxhat
                - dxhat.sum(axis=axes).reshape(bshape)
                - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        else:
            gx = dxhat * invstd.reshape(bshape)
        return gx, gg, gb

    return Tensor._node(out, (x, gamma, beta), backward)


def adaptive_avg_pool_1x1(x):
    """Per-channel spatial mean, keeping a 1x1 spatial extent."""
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[2] < 1 or x.shape[3] < 1:
        raise ShapeError(f"adaptive pooling needs a non-empty N,C,H,W tensor, got {x.shape}")
    H, W = x.shape[2:]
    out = x.data.mean(axis=(2, 3), keepdims=True)
    return Tensor._node(out, (x,), lambda g: (np.broadcast_to(g / (H * W), x.shape).copy(),))


def _windows(x, k, stride):
    N, C, H, W = x.shape
    if H < 1 or W < 1:
        raise ShapeError("pooling over an empty spatial extent")
    if k > H or k > W:
        raise ShapeError(f"pool window {k} larger than input {H}x{W}")
    Ho, Wo = (H - k) // stride + 1, (W - k) // stride + 1
    win = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    return win, Ho, Wo


def avg_pool2d(x, k, stride=None):
    x = as_tensor(x)
    stride = stride or k
    win, Ho, Wo = _windows(x, k, stride)
    out = win.mean(axis=(4, 5))

    def backward(g):
        gx = np.zeros(x.shape)
        for i in range(k):
            for j in range(k):
                gx[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += g / (k * k)
        return (gx,)

    return Tensor._node(out, (x,), backward)


def max_pool2d(x, k, stride=None):
    x = as_tensor(x)
    stride = stride or k
    win, Ho, Wo = _windows(x, k, stride)
    flat = win.reshape(win.shape[:4] + (k * k,))
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros(x.shape)
        for i in range(k):
            for j in range(k):
                hit = arg == i * k + j
                gx[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += g * hit
        return (gx,)

    return Tensor._node(out, (x,), backward)


def region_pool(feat, boxes, batch_index, out_size, scale, samples=2):
    """Bilinear average pooling of box regions onto an ``out_size`` square grid.

    ``boxes`` is an (M, 4) tensor of image-space ``(x, y, w, h)``; ``scale``
    maps image to feature coordinates, whose cell ``i`` is centred at
    ``(i + 0.5) / scale``.  Each output cell averages a ``samples`` x
    ``samples`` grid of bilinear reads; reads outside the map are clamped to
    the border.  Differentiable in both ``feat`` and ``boxes``.
    """
    feat, boxes = as_tensor(feat), as_tensor(boxes)
    if feat.ndim != 4:
        raise ShapeError(f"region_pool needs N,C,H,W features, got {feat.shape}")
    if boxes.ndim != 2 or boxes.shape[1] != 4:
        raise ShapeError(f"region_pool boxes must be (M, 4), got {boxes.shape}")
    bidx = np.asarray(batch_index, dtype=np.int64).reshape(-1)
    M = boxes.shape[0]
    if len(bidx) != M:
        raise ShapeError("one batch index per box required")
    bd = boxes.data
    if np.any(~(bd[:, 2] > 0)) or np.any(~(bd[:, 3] > 0)):
        raise BoxError("region_pool: box with non-positive extent")
    N, C, H, W = feat.shape
    S, K = int(samples), int(out_size)
    G = K * S
    frac = (np.arange(G) + 0.5) / G  # sample positions as box fractions

    def axis_coords(origin, extent, limit):
        u = (origin[:, None] + frac[None, :] * extent[:, None]) * scale - 0.5  # M, G
        inside = (u > 0) & (u < limit - 1)
        uc = np.clip(u, 0, limit - 1)
        i0 = np.minimum(np.floor(uc).astype(np.int64), max(limit - 2, 0))
        i1 = np.minimum(i0 + 1, limit - 1)
        a = uc - i0
        return i0, i1, a, inside

    x0, x1, ax, in_x = axis_coords(bd[:, 0], bd[:, 2], W)
    y0, y1, ay, in_y = axis_coords(bd[:, 1], bd[:, 3], H)
    F = feat.data.transpose(0, 2, 3, 1)  # N, H, W, C
    b = bidx[:, None, None]
    Y0, Y1 = y0[:, :, None], y1[:, :, None]
    X0, X1 = x0[:, None, :], x1[:, None, :]
    f00, f01 = F[b, Y0, X0], F[b, Y0, X1]  # M, G, G, C
    f10, f11 = F[b, Y1, X0], F[b, Y1, X1]
    AX = ax[:, None, :, None]
    AY = ay[:, :, None, None]
    top = f00 + AX * (f01 - f00)
    bot = f10 + AX * (f11 - f10)
    val = top + AY * (bot - top)
    out = val.reshape(M, K, S, K, S, C).mean(axis=(2, 4)).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def backward(g):
        gp = np.repeat(np.repeat(g.transpose(0, 2, 3, 1), S, axis=1), S, axis=2) / (S * S)  # M, G, G, C
        gf = gb = None
        if feat.requires_grad:
            acc = np.zeros((N * H * W, C))
            w00 = (1 - AY) * (1 - AX)
            w01 = (1 - AY) * AX
            w10 = AY * (1 - AX)
            w11 = AY * AX
            base = b * H * W
            for yy, xx, ww in ((Y0, X0, w00), (Y0, X1, w01), (Y1, X0, w10), (Y1, X1, w11)):
                idx = np.broadcast_to(base + yy * W + xx, (M, G, G)).reshape(-1)
                np.add.at(acc, idx, (gp * ww).reshape(-1, C))
            gf = acc.reshape(N, H, W, C).transpose(0, 3, 1, 2)
        if boxes.requires_grad:
            dv_du = (1 - AY) * (f01 - f00) + AY * (f11 - f10)  # d val / d feature-x
            dv_dv = bot - top  # d val / d feature-y
            sx = (gp * dv_du).sum(axis=3) * in_x[:, None, :] * scale  # M, G, G
            sy = (gp * dv_dv).sum(axis=3) * in_y[:, :, None] * scale
            gb = np.stack([
                sx.sum(axis=(1, 2)),
                sy.sum(axis=(1, 2)),
                (sx * frac[None, None, :]).sum(axis=(1, 2)),
                (sy * frac[None, :, None]).sum(axis=(1, 2)),
            ], axis=1)
        return gf, gb

    return Tensor._node(out, (feat, boxes), backward)
