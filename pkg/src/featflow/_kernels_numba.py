"""Numba kernels for the hot inner loops: convolution, NMS, greedy spacing,
and the per-level LK solver.

All kernels are sequential (no prange) so results are independent of the
thread count. Convolution and the LK normal equations accumulate in float64
and store float32, which keeps the outputs within ~1e-13 of the exact sum.
Convolution runs on channel planes (C, H, W) with reusable output buffers
and an optional fused ReLU; image sampling runs on (H, W, C) maps whose
contiguous rows make the interior window fast path vectorizable.
"""

from __future__ import annotations

import numpy as np
from numba import njit

# Tracking status codes shared with tracking.py.
ST_OK = 0
ST_OUT_OF_BOUNDS = 1
ST_SINGULAR = 2
ST_DIVERGED = 3
ST_CONVERGED = 4
ST_FAILED_FB = 5
ST_NOT_PSD = 6


@njit(cache=True)
def conv3x3_planes(inp, weights, bias, apply_relu, out):
    """3x3 convolution with zero padding, stride 1, optional fused ReLU.
    inp (Ci,H,W) f32, weights (Co,Ci,3,3) f32, bias (Co,) f32, out (Co,H,W)
    f32 written in place and returned.

    Source rows are widened to float64 once per image row (rolling 3-row
    buffer, slot = row index mod 3) so the FMA loops run conversion-free."""
    ci_n, h, w = inp.shape
    co_n = weights.shape[0]
    row = np.empty(w, np.float64)
    src64 = np.empty((ci_n, 3, w), np.float64)
    for ci in range(ci_n):
        for x in range(w):
            src64[ci, 0, x] = inp[ci, 0, x]
        if h > 1:
            for x in range(w):
                src64[ci, 1, x] = inp[ci, 1, x]
    for y in range(h):
        if y > 0 and y + 1 < h:
            slot = (y + 1) % 3
            for ci in range(ci_n):
                for x in range(w):
                    src64[ci, slot, x] = inp[ci, y + 1, x]
        for co in range(co_n):
            bv = np.float64(bias[co])
            for x in range(w):
                row[x] = bv
            for ci in range(ci_n):
                for dyi in range(3):
                    yy = y + dyi - 1
                    if yy < 0 or yy >= h:
                        continue
                    src = src64[ci, yy % 3]
                    w0 = np.float64(weights[co, ci, dyi, 0])
                    w1 = np.float64(weights[co, ci, dyi, 1])
                    w2 = np.float64(weights[co, ci, dyi, 2])
                    for x in range(1, w - 1):
                        row[x] += w0 * src[x - 1] + w1 * src[x] + w2 * src[x + 1]
                    if w == 1:
                        row[0] += w1 * src[0]
                    else:
                        row[0] += w1 * src[0] + w2 * src[1]
                        row[w - 1] += w0 * src[w - 2] + w1 * src[w - 1]
            if apply_relu:
                for x in range(w):
                    out[co, y, x] = np.float32(max(0.0, row[x]))
            else:
                for x in range(w):
                    out[co, y, x] = np.float32(row[x])
    return out


@njit(cache=True)
def conv1x1_planes(inp, weights, bias, apply_relu, out):
    """1x1 convolution, optional fused ReLU. inp (Ci,H,W) f32,
    weights (Co,Ci,1,1) f32 -> out (Co,H,W) f32."""
    ci_n, h, w = inp.shape
    co_n = weights.shape[0]
    row = np.empty(w, np.float64)
    src64 = np.empty((ci_n, w), np.float64)
    for y in range(h):
        for ci in range(ci_n):
            for x in range(w):
                src64[ci, x] = inp[ci, y, x]
        for co in range(co_n):
            bv = np.float64(bias[co])
            for x in range(w):
                row[x] = bv
            for ci in range(ci_n):
                src = src64[ci]
                wv = np.float64(weights[co, ci, 0, 0])
                for x in range(w):
                    row[x] += wv * src[x]
            if apply_relu:
                for x in range(w):
                    out[co, y, x] = np.float32(max(0.0, row[x]))
            else:
                for x in range(w):
                    out[co, y, x] = np.float32(row[x])
    return out


@njit(cache=True)
def featscore_from_planes(dec_planes, epsilon, feat_out, score_raw_out):
    """Split decoder planes: channels 0..2 are L2-normalized per pixel into
    feat_out (H,W,3); channel 3 is copied raw into score_raw_out (H,W,1)
    for the sigmoid outside. Float32 arithmetic matches the unfused ops."""
    _, h, w = dec_planes.shape
    for y in range(h):
        for x in range(w):
            a = dec_planes[0, y, x]
            b = dec_planes[1, y, x]
            c = dec_planes[2, y, x]
            n2 = a * a + b * b
            n2 = n2 + c * c
            n = np.sqrt(n2)
            if n < epsilon:
                n = epsilon
            feat_out[y, x, 0] = a / n
            feat_out[y, x, 1] = b / n
            feat_out[y, x, 2] = c / n
            score_raw_out[y, x, 0] = dec_planes[3, y, x]


@njit(cache=True)
def nms_3x3(score):
    """Strict 8-neighbor local maxima of a (H, W) map; border excluded.
    Returns (ys, xs) int64 arrays in row-major order."""
    h, w = score.shape
    count = 0
    ys = np.empty(h * w, np.int64)
    xs = np.empty(h * w, np.int64)
    for y in range(1, h - 1):
        for x in range(1, w - 1):
            v = score[y, x]
            if (
                v > score[y - 1, x - 1]
                and v > score[y - 1, x]
                and v > score[y - 1, x + 1]
                and v > score[y, x - 1]
                and v > score[y, x + 1]
                and v > score[y + 1, x - 1]
                and v > score[y + 1, x]
                and v > score[y + 1, x + 1]
            ):
                ys[count] = y
                xs[count] = x
                count += 1
    return ys[:count], xs[:count]


@njit(cache=True)
def greedy_min_interval(ys, xs, h, w, radius, max_points):
    """Greedy selection of pre-ordered candidates, rejecting any point with
    Chebyshev distance <= radius to an already-selected one. Returns selected
    indices into ys/xs."""
    taken = np.zeros((h, w), np.uint8)
    sel = np.empty(min(max_points, ys.shape[0]), np.int64)
    n_sel = 0
    for i in range(ys.shape[0]):
        if n_sel >= max_points:
            break
        y = ys[i]
        x = xs[i]
        if radius >= 0:
            y0 = max(0, y - radius)
            y1 = min(h - 1, y + radius)
            x0 = max(0, x - radius)
            x1 = min(w - 1, x + radius)
            blocked = False
            for yy in range(y0, y1 + 1):
                for xx in range(x0, x1 + 1):
                    if taken[yy, xx]:
                        blocked = True
                        break
                if blocked:
                    break
            if blocked:
                continue
        taken[y, x] = 1
        sel[n_sel] = i
        n_sel += 1
    return sel[:n_sel]


@njit(cache=True, inline="always")
def _sample_window(img, cx, cy, r, buf):
    """Bilinear-sample a (2r+1)^2 window of img (H,W,C) centered at (cx, cy)
    into the float32 buffer buf ((2r+1)*(2r+1)*C,). Coordinates clamp to the
    image rectangle (replicate border). Interior windows take a flat-indexed
    row path that the compiler vectorizes."""
    h, w, c = img.shape
    n = 2 * r + 1
    xb = int(np.floor(cx))
    yb = int(np.floor(cy))
    one = np.float32(1.0)
    if xb - r >= 0 and xb + r + 1 <= w - 1 and yb - r >= 0 and yb + r + 1 <= h - 1:
        fx = np.float32(cx - xb)
        fy = np.float32(cy - yb)
        w00 = (one - fy) * (one - fx)
        w01 = (one - fy) * fx
        w10 = fy * (one - fx)
        w11 = fy * fx
        flat = img.ravel()
        stride = w * c
        m = n * c
        for oy in range(n):
            row0 = (yb - r + oy) * stride + (xb - r) * c
            row1 = row0 + stride
            base = oy * m
            for i in range(m):
                buf[base + i] = (
                    w00 * flat[row0 + i]
                    + w01 * flat[row0 + i + c]
                    + w10 * flat[row1 + i]
                    + w11 * flat[row1 + i + c]
                )
        return

    idx = 0
    for oy in range(-r, r + 1):
        fyy = cy + oy
        if fyy < 0.0:
            fyy = 0.0
        elif fyy > h - 1:
            fyy = np.float64(h - 1)
        y0 = int(fyy)
        if y0 > h - 2:
            y0 = h - 2
        if y0 < 0:
            y0 = 0
        ay = np.float32(fyy - y0)
        for ox in range(-r, r + 1):
            fxx = cx + ox
            if fxx < 0.0:
                fxx = 0.0
            elif fxx > w - 1:
                fxx = np.float64(w - 1)
            x0 = int(fxx)
            if x0 > w - 2:
                x0 = w - 2
            if x0 < 0:
                x0 = 0
            ax = np.float32(fxx - x0)
            w00 = (one - ay) * (one - ax)
            w01 = (one - ay) * ax
            w10 = ay * (one - ax)
            w11 = ay * ax
            for ch in range(c):
                buf[idx] = (
                    w00 * img[y0, x0, ch]
                    + w01 * img[y0, x0 + 1, ch]
                    + w10 * img[y0 + 1, x0, ch]
                    + w11 * img[y0 + 1, x0 + 1, ch]
                )
                idx += 1


@njit(cache=True)
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
    """One pyramid level of iterative multi-channel LK for all points.

    px/py are the point coordinates at this level; vx/vy the displacement
    estimates (updated in place). status holds ST_* codes; points not ST_OK
    are skipped. On the finest level the final status and window residual
    are written."""
    h, w, c = prev_level.shape
    r = window_radius
    n_win = (2 * r + 1) * (2 * r + 1) * c
    tmpl = np.empty(n_win, np.float32)
    gxs = np.empty(n_win, np.float32)
    gys = np.empty(n_win, np.float32)
    nxt = np.empty(n_win, np.float32)
    dt = np.empty(n_win, np.float32)
    area = np.float64((2 * r + 1) * (2 * r + 1))

    for p in range(px.shape[0]):
        if status[p] != ST_OK:
            continue
        cx = px[p]
        cy = py[p]
        _sample_window(prev_level, cx, cy, r, tmpl)
        _sample_window(grad_x, cx, cy, r, gxs)
        _sample_window(grad_y, cx, cy, r, gys)

        gxx = np.float64(np.dot(gxs, gxs))
        gxy = np.float64(np.dot(gxs, gys))
        gyy = np.float64(np.dot(gys, gys))

        trace = gxx + gyy
        disc = np.sqrt((gxx - gyy) * (gxx - gyy) + 4.0 * gxy * gxy)
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
                tx = min(max(tx, 0.0), np.float64(w - 1))
                ty = min(max(ty, 0.0), np.float64(h - 1))
                vx[p] = tx - cx
                vy[p] = ty - cy
            _sample_window(next_level, tx, ty, r, nxt)
            for i in range(n_win):
                dt[i] = nxt[i] - tmpl[i]
            bx = np.float64(np.dot(gxs, dt))
            by = np.float64(np.dot(gys, dt))
            if it == 0:
                res0 = 0.0
                for i in range(n_win):
                    res0 += abs(np.float64(dt[i]))
                initial_residual = res0
            # Solve G d = -b as in the stacked least-squares system.
            dx = -(inv00 * bx + inv01 * by)
            dy = -(inv01 * bx + inv11 * by)
            vx[p] += dx
            vy[p] += dy
            last_update = np.sqrt(dx * dx + dy * dy)
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
            tx = min(max(tx, 0.0), np.float64(w - 1))
            ty = min(max(ty, 0.0), np.float64(h - 1))
            vx[p] = tx - cx
            vy[p] = ty - cy

        if is_finest:
            _sample_window(next_level, tx, ty, r, nxt)
            res = 0.0
            for i in range(n_win):
                res += abs(np.float64(nxt[i]) - np.float64(tmpl[i]))
            residual[p] = res / n_win
            if last_update < epsilon:
                status[p] = ST_CONVERGED
            elif initial_residual >= 0.0 and res > initial_residual:
                status[p] = ST_DIVERGED
            else:
                status[p] = ST_CONVERGED
