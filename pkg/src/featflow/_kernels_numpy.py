"""Pure-numpy fallbacks for the hot kernels.

Same contracts as _kernels_numba; used when FEATFLOW_BACKEND=numpy or numba
is unavailable. Convolution goes through float64 matmuls so both backends
agree to float32 rounding.
"""

from __future__ import annotations

import math

import numpy as np

ST_OK = 0
ST_OUT_OF_BOUNDS = 1
ST_SINGULAR = 2
ST_DIVERGED = 3
ST_CONVERGED = 4
ST_FAILED_FB = 5
ST_NOT_PSD = 6


def conv2d_hwc(inp, weights, bias):
    """Convolution on (H,W,Ci) f32 input with (Co,Ci,k,k) weights, zero
    padding for k=3, stride 1 -> (H,W,Co) f32."""
    h, w, _ = inp.shape
    co_n = weights.shape[0]
    k = weights.shape[2]
    x64 = inp.astype(np.float64)
    w64 = weights.astype(np.float64)
    acc = np.zeros((h, w, co_n), np.float64)
    acc += bias.astype(np.float64)
    if k == 1:
        acc += x64 @ w64[:, :, 0, 0].T
    else:
        pad = np.zeros((h + 2, w + 2, inp.shape[2]), np.float64)
        pad[1:-1, 1:-1, :] = x64
        for dy in range(3):
            for dx in range(3):
                acc += pad[dy : dy + h, dx : dx + w, :] @ w64[:, :, dy, dx].T
    return acc.astype(np.float32)


def nms_3x3(score):
    h, w = score.shape
    if h < 3 or w < 3:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    c = score[1:-1, 1:-1]
    mask = np.ones((h - 2, w - 2), bool)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            mask &= c > score[1 + dy : h - 1 + dy, 1 + dx : w - 1 + dx]
    ys, xs = np.nonzero(mask)
    return (ys + 1).astype(np.int64), (xs + 1).astype(np.int64)


def greedy_min_interval(ys, xs, h, w, radius, max_points):
    taken = np.zeros((h, w), np.uint8)
    sel = []
    for i in range(ys.shape[0]):
        if len(sel) >= max_points:
            break
        y = int(ys[i])
        x = int(xs[i])
        if radius >= 0:
            y0 = max(0, y - radius)
            y1 = min(h - 1, y + radius)
            x0 = max(0, x - radius)
            x1 = min(w - 1, x + radius)
            if taken[y0 : y1 + 1, x0 : x1 + 1].any():
                continue
        taken[y, x] = 1
        sel.append(i)
    return np.asarray(sel, np.int64)


def _sample_window(img, cx, cy, r):
    """Bilinear window sample with replicate-clamped coordinates.
    Returns a flat ((2r+1)^2 * C,) float64 buffer."""
    h, w, c = img.shape
    offs = np.arange(-r, r + 1, dtype=np.float64)
    fy = np.clip(cy + offs, 0.0, h - 1.0)
    fx = np.clip(cx + offs, 0.0, w - 1.0)
    y0 = np.clip(fy.astype(np.int64), 0, h - 2)
    x0 = np.clip(fx.astype(np.int64), 0, w - 2)
    ay = (fy - y0)[:, None, None]
    ax = (fx - x0)[None, :, None]
    img64 = img  # float32 reads, combined in float64 below
    a = img64[y0[:, None], x0[None, :], :].astype(np.float64)
    b = img64[y0[:, None], x0[None, :] + 1, :].astype(np.float64)
    d = img64[y0[:, None] + 1, x0[None, :], :].astype(np.float64)
    e = img64[y0[:, None] + 1, x0[None, :] + 1, :].astype(np.float64)
    vals = (1.0 - ay) * ((1.0 - ax) * a + ax * b) + ay * ((1.0 - ax) * d + ax * e)
    return vals.reshape(-1)


def lk_level(
    prev_level,
    grad_x,
    grad_y,
    next_level,
    px,
    py,
    vx,
    vy,
    status,
    residual,
    window_radius,
    max_iterations,
    epsilon,
    min_eigen_threshold,
    is_finest,
):
    h, w, c = prev_level.shape
    r = window_radius
    n_win = (2 * r + 1) * (2 * r + 1) * c
    area = float((2 * r + 1) * (2 * r + 1))

    for p in range(px.shape[0]):
        if status[p] != ST_OK:
            continue
        cx = float(px[p])
        cy = float(py[p])
        tmpl = _sample_window(prev_level, cx, cy, r)
        gxs = _sample_window(grad_x, cx, cy, r)
        gys = _sample_window(grad_y, cx, cy, r)

        gxx = float(np.dot(gxs, gxs))
        gxy = float(np.dot(gxs, gys))
        gyy = float(np.dot(gys, gys))
        trace = gxx + gyy
        disc = math.sqrt((gxx - gyy) ** 2 + 4.0 * gxy * gxy)
        eig_min = 0.5 * (trace - disc)
        if eig_min < -1e-8 * max(1.0, trace):
            status[p] = ST_NOT_PSD
            continue
        if eig_min / area < min_eigen_threshold:
            status[p] = ST_SINGULAR
            continue
        det = gxx * gyy - gxy * gxy
        if det < 1e-12:
            status[p] = ST_SINGULAR
            continue
        inv00 = gyy / det
        inv01 = -gxy / det
        inv11 = gxx / det

        initial_residual = -1.0
        last_update = np.inf
        for it in range(max_iterations):
            tx = cx + vx[p]
            ty = cy + vy[p]
            if tx < 0.0 or tx > w - 1 or ty < 0.0 or ty > h - 1:
                if is_finest:
                    status[p] = ST_OUT_OF_BOUNDS
                    break
                # coarse levels clamp the center back in; finer levels refine
                tx = min(max(tx, 0.0), float(w - 1))
                ty = min(max(ty, 0.0), float(h - 1))
                vx[p] = tx - cx
                vy[p] = ty - cy
            nxt = _sample_window(next_level, tx, ty, r)
            dt = nxt - tmpl
            bx = float(np.dot(gxs, dt))
            by = float(np.dot(gys, dt))
            if it == 0:
                initial_residual = float(np.sum(np.abs(dt)))
            dx = -(inv00 * bx + inv01 * by)
            dy = -(inv01 * bx + inv11 * by)
            vx[p] += dx
            vy[p] += dy
            last_update = math.sqrt(dx * dx + dy * dy)
            if last_update < epsilon:
                break
        if status[p] != ST_OK:
            continue

        tx = cx + vx[p]
        ty = cy + vy[p]
        if tx < 0.0 or tx > w - 1 or ty < 0.0 or ty > h - 1:
            if is_finest:
                status[p] = ST_OUT_OF_BOUNDS
                continue
            tx = min(max(tx, 0.0), float(w - 1))
            ty = min(max(ty, 0.0), float(h - 1))
            vx[p] = tx - cx
            vy[p] = ty - cy

        if is_finest:
            nxt = _sample_window(next_level, tx, ty, r)
            res = float(np.sum(np.abs(nxt - tmpl)))
            residual[p] = res / n_win
            if last_update < epsilon:
                status[p] = ST_CONVERGED
            elif initial_residual >= 0.0 and res > initial_residual:
                status[p] = ST_DIVERGED
            else:
                status[p] = ST_CONVERGED
