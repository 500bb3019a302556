"""Slow, independent reference implementations used as test oracles.

Everything here is written with explicit Python loops over pixels so it shares no
code path with the vectorized library functions it checks.
"""
import math

import numpy as np


def bilinear_at(img, x, y, fill):
    """Sample ``img`` (C x H x W numpy) at continuous pixel coords with constant fill."""
    c, h, w = img.shape
    x0, y0 = math.floor(x), math.floor(y)
    out = np.zeros(c)
    for yy, wy in ((y0, 1 - (y - y0)), (y0 + 1, y - y0)):
        for xx, wx in ((x0, 1 - (x - x0)), (x0 + 1, x - x0)):
            wgt = wx * wy
            if wgt == 0:
                continue
            if 0 <= xx < w and 0 <= yy < h:
                out += wgt * img[:, yy, xx]
            else:
                out += wgt * fill
    return out


def affine_oracle(img, a1, a2, b1, b2, fill):
    c, h, w = img.shape
    out = np.zeros_like(img, dtype=np.float64)
    for i in range(h):
        for j in range(w):
            xn = (2 * j + 1) / w - 1
            yn = (2 * i + 1) / h - 1
            sx = a1 * xn + b1
            sy = a2 * yn + b2
            px = ((sx + 1) * w - 1) / 2
            py = ((sy + 1) * h - 1) / 2
            out[:, i, j] = bilinear_at(img, px, py, fill)
    return out


def flow_oracle(img, flow, fill):
    c, h, w = img.shape
    out = np.zeros_like(img, dtype=np.float64)
    for i in range(h):
        for j in range(w):
            out[:, i, j] = bilinear_at(img, j + flow[0, i, j], i + flow[1, i, j], fill)
    return out


def sigmoid(v):
    return 1.0 / (1.0 + math.exp(-v))


def conv3x3_at(weight, bias, x, o, i, j):
    """Single output value of a zero-padded 3x3 convolution (cross-correlation)."""
    cin, h, w = x.shape
    acc = 0.0 if bias is None else float(bias[o])
    for ci in range(cin):
        for di in range(3):
            for dj in range(3):
                ii, jj = i + di - 1, j + dj - 1
                if 0 <= ii < h and 0 <= jj < w:
                    acc += float(weight[o, ci, di, dj]) * float(x[ci, ii, jj])
    return acc


def gru_oracle(w, f, h_prev):
    """Scalar-loop ConvGRU update.

    ``w`` maps names ``fr, hr, fz, hz, fh, hh`` to ``(weight, bias)`` numpy pairs.
    """
    ch, hh_, ww_ = h_prev.shape
    r = np.zeros_like(h_prev)
    z = np.zeros_like(h_prev)
    for o in range(ch):
        for i in range(hh_):
            for j in range(ww_):
                r[o, i, j] = sigmoid(conv3x3_at(*w["fr"], f, o, i, j) + conv3x3_at(*w["hr"], h_prev, o, i, j))
                z[o, i, j] = sigmoid(conv3x3_at(*w["fz"], f, o, i, j) + conv3x3_at(*w["hz"], h_prev, o, i, j))
    rh = r * h_prev
    out = np.zeros_like(h_prev)
    for o in range(ch):
        for i in range(hh_):
            for j in range(ww_):
                cand = math.tanh(conv3x3_at(*w["fh"], f, o, i, j) + conv3x3_at(*w["hh"], rh, o, i, j))
                out[o, i, j] = (1 - z[o, i, j]) * h_prev[o, i, j] + z[o, i, j] * cand
    return out


def gravity_oracle(mask, floor):
    h, w = mask.shape
    out = np.zeros((h, w))
    for j in range(w):
        rows = [i for i in range(h) if mask[i, j] > 0.5]
        if not rows:
            continue
        t, b = rows[0], rows[-1]
        for i in range(t, b + 1):
            out[i, j] = 1.0 if b == t else 1.0 - (1.0 - floor) * (i - t) / (b - t)
    return out


def agnostic_oracle(labels, clothing=3, arms=(4, 5), preserve=(0, 1, 2, 6)):
    """Three-step mask: clothing rectangle, grown over arms, preserved classes released."""
    h, w = labels.shape
    coords = [(i, j) for i in range(h) for j in range(w) if labels[i, j] == clothing]
    t = min(i for i, _ in coords)
    b = max(i for i, _ in coords)
    lft = min(j for _, j in coords)
    rgt = max(j for _, j in coords)
    for i in range(h):
        for j in range(w):
            if labels[i, j] in arms:
                t, b, lft, rgt = min(t, i), max(b, i), min(lft, j), max(rgt, j)
    mask = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            if t <= i <= b and lft <= j <= rgt and labels[i, j] not in preserve:
                mask[i, j] = 1.0
    return mask


def central_difference(fn, x, index, h=1e-6):
    """Central-difference derivative of scalar ``fn`` w.r.t. ``x.view(-1)[index]``."""
    flat = x.view(-1)
    orig = flat[index].item()
    flat[index] = orig + h
    up = float(fn(x))
    flat[index] = orig - h
    down = float(fn(x))
    flat[index] = orig
    return (up - down) / (2 * h)


def gradient_check(fn, x, n_coords=10, seed=0, h=1e-6):
    """Max relative error between autograd and central differences at random coords."""
    import torch

    x = x.detach().clone().requires_grad_(True)
    fn(x).backward()
    grad = x.grad.detach().view(-1)
    rng = np.random.default_rng(seed)
    idx = rng.choice(x.numel(), size=min(n_coords, x.numel()), replace=False)
    worst = 0.0
    with torch.no_grad():
        probe = x.detach().clone()
        for k in idx:
            fd = central_difference(fn, probe, int(k), h)
            ad = float(grad[k])
            denom = max(abs(fd), abs(ad), 1e-6)
            worst = max(worst, abs(fd - ad) / denom)
    return worst
