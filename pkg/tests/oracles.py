"""Slow, loop-based reference implementations used as test oracles.

Each one is written from the definition, per event or per pixel, without
sharing code with the package.
"""

import math

import numpy as np


def random_stream_columns(rng, n, width, height, t_max, sorted_=True):
    t = rng.integers(0, t_max + 1, n)
    if sorted_:
        t = np.sort(t)
    x = rng.integers(0, width, n)
    y = rng.integers(0, height, n)
    p = rng.choice([-1, 1], n)
    return t, x, y, p


def bin_of(t, t_start, t_end, n):
    """Bin of ``t``: the last i with T_start + i*B <= t, found by walking the edges.

    Edges are compared as exact fractions (t - T_start) * n >= i * (T_end - T_start).
    """
    i = 0
    while i + 1 < n and (t - t_start) * n >= (i + 1) * (t_end - t_start):
        i += 1
    return i


def latest_polarity_scan(ts, xs, ys, ps, width, height):
    """Per pixel: scan every event, keep the one with the largest t (later stream position wins ties)."""
    frame = [[127] * width for _ in range(height)]
    best = [[None] * width for _ in range(height)]
    for t, x, y, p in zip(ts, xs, ys, ps):
        if best[y][x] is None or t >= best[y][x]:
            best[y][x] = t
            frame[y][x] = 255 if p > 0 else 0
    return np.array(frame, dtype=np.uint8)


def interframe_latest_oracle(ts, xs, ys, ps, t_start, t_end, n, width, height):
    bins = [([], [], [], []) for _ in range(n)]
    for t, x, y, p in zip(ts, xs, ys, ps):
        if t_start <= t <= t_end:
            b = bin_of(t, t_start, t_end, n)
            for col, v in zip(bins[b], (t, x, y, p)):
                col.append(v)
    return np.stack([latest_polarity_scan(*b, width, height)[None] for b in bins])


def event_count_oracle(ts, xs, ys, ps, width, height):
    counts = np.zeros((2, height, width))
    for x, y, p in zip(xs, ys, ps):
        counts[0 if p > 0 else 1, y, x] += 1
    peak = counts.max()
    return counts * (255.0 / peak) if peak > 0 else counts


def event_frame_oracle(ts, xs, ys, ps, width, height):
    s = np.zeros((1, height, width))
    for x, y, p in zip(xs, ys, ps):
        s[0, y, x] += p
    peak = np.abs(s).max()
    return 127.0 + 127.0 * (s / peak) if peak > 0 else np.full_like(s, 127.0)


def _latest(ts, xs, ys, ps, width, height, pol):
    latest = {}
    for t, x, y, p in zip(ts, xs, ys, ps):
        if p == pol and ((y, x) not in latest or t > latest[(y, x)]):
            latest[(y, x)] = t
    return latest


def time_surface_oracle(ts, xs, ys, ps, width, height, t_start, t_end, tau=None):
    tau = float(tau or (t_end - t_start) / 3.0)
    out = np.zeros((2, height, width))
    for c, pol in enumerate((1, -1)):
        for (y, x), t in _latest(ts, xs, ys, ps, width, height, pol).items():
            out[c, y, x] = 255.0 * math.exp(-float(t_end - t) / tau)
    return out


def tsltd_oracle(ts, xs, ys, ps, width, height, t_start, t_end):
    span = float(t_end - t_start)
    out = np.zeros((2, height, width))
    for c, pol in enumerate((1, -1)):
        for (y, x), t in _latest(ts, xs, ys, ps, width, height, pol).items():
            out[c, y, x] = 255.0 * max(0.0, 1.0 - float(t_end - t) / span)
    return out


def zhu_voxel_oracle(ts, xs, ys, ps, width, height, t_start, t_end, num_bins):
    vox = np.zeros((num_bins, height, width))
    span = float(t_end - t_start)
    for t, x, y, p in zip(ts, xs, ys, ps):
        tn = (num_bins - 1) * float(t - t_start) / span if num_bins > 1 else 0.0
        for b in range(num_bins):
            vox[b, y, x] += p * max(0.0, 1.0 - abs(b - tn))
    peak = np.abs(vox).max()
    return 127.5 * (1.0 + vox / peak) if peak > 0 else np.full_like(vox, 127.5)


def iou_oracle(a, b):
    ax0, ay0, aw, ah = a
    bx0, by0, bw, bh = b
    iw = max(0.0, min(ax0 + aw, bx0 + bw) - max(ax0, bx0))
    ih = max(0.0, min(ay0 + ah, by0 + bh) - max(ay0, by0))
    inter = iw * ih
    return inter / (aw * ah + bw * bh - inter)


def success_oracle(ious):
    curve = []
    for k in range(101):
        tau = k / 100
        curve.append(sum(1 for v in ious if v > tau) / len(ious))
    return curve


def precision_oracle(errors):
    curve = []
    for d in range(51):
        curve.append(sum(1 for e in errors if e <= d) / len(errors))
    return curve


def hinge_oracle(s, z):
    if z > 0.05:
        return s - z
    return s if s > 0 else 0.0


def conv_loop_oracle(x, w, b, stride=1, pad=0):
    """Direct six-loop cross-correlation with symmetric zero padding."""
    N, C, H, W = x.shape
    O, _, kh, kw = w.shape
    xp = np.zeros((N, C, H + 2 * pad, W + 2 * pad))
    xp[:, :, pad:pad + H, pad:pad + W] = x
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((N, O, Ho, Wo))
    for n in range(N):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    acc = 0.0 if b is None else b[o]
                    for c in range(C):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[n, c, i * stride + u, j * stride + v] * w[o, c, u, v]
                    out[n, o, i, j] = acc
    return out


def sigmoid_oracle(x):
    return 1.0 / (1.0 + np.exp(-x))


def bilinear_oracle(plane, u, v):
    """Bilinear read of a 2-D array at (column u, row v), coordinates clamped to the border."""
    H, W = plane.shape
    u = min(max(u, 0.0), W - 1.0)
    v = min(max(v, 0.0), H - 1.0)
    i, j = int(math.floor(v)), int(math.floor(u))
    i1, j1 = min(i + 1, H - 1), min(j + 1, W - 1)
    a, b = u - j, v - i
    top = plane[i, j] * (1 - a) + plane[i, j1] * a
    bot = plane[i1, j] * (1 - a) + plane[i1, j1] * a
    return top * (1 - b) + bot * b


def region_pool_oracle(feat, box, out_size, scale, samples=2):
    """Average of samples x samples bilinear reads per output cell; feature cell i sits at (i + 0.5) / scale."""
    C = feat.shape[0]
    x0, y0, w, h = box
    G = out_size * samples
    out = np.zeros((C, out_size, out_size))
    for c in range(C):
        for r in range(out_size):
            for q in range(out_size):
                acc = 0.0
                for a in range(samples):
                    for b in range(samples):
                        y = y0 + (r * samples + a + 0.5) / G * h
                        x = x0 + (q * samples + b + 0.5) / G * w
                        acc += bilinear_oracle(feat[c], x * scale - 0.5, y * scale - 0.5)
                out[c, r, q] = acc / samples ** 2
    return out


def gaussian_label_oracle(cx, cy, w, h, rows, cols, stride):
    sigma = max(1.0, math.sqrt(w * h) / 4.0 / stride)
    z = np.zeros((rows, cols))
    for r in range(rows):
        for c in range(cols):
            z[r, c] = math.exp(-((c - cx) ** 2 + (r - cy) ** 2) / (2 * sigma * sigma))
    return z
