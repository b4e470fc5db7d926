"""Coarse-to-fine iterative multi-channel LK over feature-map pyramids.

The solver stacks the per-pixel, per-channel linear constraints of the
window into one 2x2 normal system per point: G = sum [gx; gy][gx; gy]^T,
b = -sum [gx; gy] * F_t with F_t the sampled temporal difference, then
iterates v <- v + G^-1 b. Upper-level results seed the next finer level
(doubled). Gradients come from the previous frame, held fixed across
iterations; window samples clamp to the image rectangle at the borders
(same convention as spatial_gradients). A point fails OutOfBounds when its
iterated center leaves the image at the finest level; coarse levels clamp
the center back inside and let the finer levels refine.
"""

from __future__ import annotations

import enum
import math
import threading
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from . import backend, ops
from .detector import Keypoint
from .network import NetOutput


class TrackStatus(enum.Enum):
    CONVERGED = "converged"
    OUT_OF_BOUNDS = "out_of_bounds"
    SINGULAR = "singular"
    DIVERGED = "diverged"
    FAILED_FB_CHECK = "failed_fb_check"


_STATUS_FROM_CODE = {
    1: TrackStatus.OUT_OF_BOUNDS,
    2: TrackStatus.SINGULAR,
    3: TrackStatus.DIVERGED,
    4: TrackStatus.CONVERGED,
    5: TrackStatus.FAILED_FB_CHECK,
}


@dataclass(frozen=True)
class TrackConfig:
    # min_eigen_threshold is scaled for unit-normalized feature maps, whose
    # window gradient energy sits around 1e-7; intensity-scale trackers use
    # much larger values.
    window_radius: int = 10
    max_iterations: int = 30
    epsilon: float = 0.01
    levels: int = 3
    min_eigen_threshold: float = 1e-8
    fb_threshold: Optional[float] = 1.0

    def __post_init__(self):
        if self.window_radius < 1:
            raise ValueError("window_radius must be >= 1")
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


@dataclass(frozen=True)
class Pyramid:
    """Level 0 is full resolution; each level halves the previous."""

    levels: tuple[np.ndarray, ...]

    @property
    def channels(self) -> int:
        return self.levels[0].shape[2]


@dataclass(frozen=True)
class TrackResult:
    origin: Keypoint
    tracked: tuple[float, float]
    status: TrackStatus
    residual: float
    fb_error: Optional[float] = None


def max_pyramid_levels(height: int, width: int) -> int:
    """Deepest pyramid whose top level is still at least 2x2."""
    n = 1
    h, w = height, width
    while h // 2 >= 2 and w // 2 >= 2:
        h //= 2
        w //= 2
        n += 1
    return n


def build_pyramid(feature_map: np.ndarray, levels: int) -> Pyramid:
    base = ops.as_map(feature_map)
    feasible = max_pyramid_levels(base.shape[0], base.shape[1])
    if levels < 1:
        raise ValueError("levels must be >= 1")
    if levels > feasible:
        raise ValueError(
            f"{levels} levels infeasible for {base.shape[1]}x{base.shape[0]} input; "
            f"maximum is {feasible}"
        )
    out = [base]
    for _ in range(levels - 1):
        out.append(ops.downsample_half(out[-1]))
    return Pyramid(levels=tuple(out))


def _central_diff_into(a: np.ndarray, gx: np.ndarray, gy: np.ndarray) -> None:
    """Central differences per channel into preallocated gx/gy,
    replicate-clamped at the borders."""
    half = np.float32(0.5)
    np.subtract(a[:, 2:], a[:, :-2], out=gx[:, 1:-1])
    np.subtract(a[:, 1], a[:, 0], out=gx[:, 0])
    np.subtract(a[:, -1], a[:, -2], out=gx[:, -1])
    gx *= half
    np.subtract(a[2:, :], a[:-2, :], out=gy[1:-1, :])
    np.subtract(a[1, :], a[0, :], out=gy[0, :])
    np.subtract(a[-1, :], a[-2, :], out=gy[-1, :])
    gy *= half


def spatial_gradients(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Central differences per channel, replicate-clamped at the borders."""
    a = ops.as_map(m)
    h, w, _ = a.shape
    if h < 3 or w < 3:
        raise ValueError(f"need at least 3x3 input for gradients, got {h}x{w}")
    gx = np.empty_like(a)
    gy = np.empty_like(a)
    _central_diff_into(a, gx, gy)
    return gx, gy


# Per-thread buffer pool for the internal pyramid/gradient arrays that die
# with each track call; results never alias them.
_buffer_store = threading.local()


def _pooled(tag: str, shape) -> np.ndarray:
    pool = getattr(_buffer_store, "pool", None)
    if pool is None:
        pool = {}
        _buffer_store.pool = pool
    key = (tag, shape)
    buf = pool.get(key)
    if buf is None:
        if len(pool) > 256:
            pool.clear()
        buf = np.empty(shape, np.float32)
        pool[key] = buf
    return buf


class _GradientPyramid:
    """Per-level gradients of a pyramid, computed once and shared by all
    points. Buffers come from the per-thread pool, so at most one instance
    per (tag, shape) may be alive per thread."""

    def __init__(self, pyramid: Pyramid, tag: str = "fwd"):
        self.gx = []
        self.gy = []
        for i, level in enumerate(pyramid.levels):
            if level.shape[0] < 3 or level.shape[1] < 3:
                raise ValueError(
                    f"pyramid level {i} too small for gradients: {level.shape}"
                )
            gx = _pooled(f"gx{tag}{i}", level.shape)
            gy = _pooled(f"gy{tag}{i}", level.shape)
            _central_diff_into(level, gx, gy)
            self.gx.append(gx)
            self.gy.append(gy)


def _kernels():
    if backend.use_numba():
        from . import _kernels_numba as k
    else:
        from . import _kernels_numpy as k
    return k


def _run_pyramidal(
    prev: Pyramid,
    grads: _GradientPyramid,
    nxt: Pyramid,
    xs: np.ndarray,
    ys: np.ndarray,
    guess_dx: np.ndarray,
    guess_dy: np.ndarray,
    config: TrackConfig,
):
    """Run all levels coarse-to-fine; returns (vx, vy, status, residual) at
    level-0 scale."""
    k = _kernels()
    n_levels = len(prev.levels)
    n = xs.shape[0]
    scale_top = float(2 ** (n_levels - 1))
    vx = guess_dx / scale_top
    vy = guess_dy / scale_top
    status = np.zeros(n, np.int32)
    residual = np.full(n, np.nan, np.float64)
    for level in range(n_levels - 1, -1, -1):
        s = float(2**level)
        k.lk_level(
            prev.levels[level],
            grads.gx[level],
            grads.gy[level],
            nxt.levels[level],
            xs / s,
            ys / s,
            vx,
            vy,
            status,
            residual,
            config.window_radius,
            config.max_iterations,
            config.epsilon,
            config.min_eigen_threshold,
            level == 0,
        )
        if level > 0:
            vx *= 2.0
            vy *= 2.0
    return vx, vy, status, residual


def _downsample_into(src: np.ndarray, dst: np.ndarray, tmp: np.ndarray) -> None:
    """2x2 block means into dst; bit-identical to ops.downsample_half."""
    h2, w2, _ = dst.shape
    a = src[0 : 2 * h2 : 2, 0 : 2 * w2 : 2]
    b = src[0 : 2 * h2 : 2, 1 : 2 * w2 : 2]
    c = src[1 : 2 * h2 : 2, 0 : 2 * w2 : 2]
    d = src[1 : 2 * h2 : 2, 1 : 2 * w2 : 2]
    np.add(a, b, out=dst)
    np.add(c, d, out=tmp)
    dst += tmp
    dst *= np.float32(0.25)


def _build_pyramid_pooled(base: np.ndarray, levels: int, tag: str) -> Pyramid:
    """build_pyramid with pooled buffers for the downsampled levels."""
    feasible = max_pyramid_levels(base.shape[0], base.shape[1])
    if levels > feasible:
        raise ValueError(
            f"{levels} levels infeasible for {base.shape[1]}x{base.shape[0]} input; "
            f"maximum is {feasible}"
        )
    out = [base]
    for i in range(1, levels):
        src = out[-1]
        shape = (src.shape[0] // 2, src.shape[1] // 2, src.shape[2])
        dst = _pooled(f"lvl{tag}{i}", shape)
        tmp = _pooled(f"tmp{tag}{i}", shape)
        _downsample_into(src, dst, tmp)
        out.append(dst)
    return Pyramid(levels=tuple(out))


def track_maps(
    prev_map: np.ndarray,
    next_map: np.ndarray,
    points: Sequence[Keypoint],
    config: TrackConfig = TrackConfig(),
) -> list[TrackResult]:
    """Track points between two feature maps of identical shape."""
    a = ops.as_map(prev_map)
    b = ops.as_map(next_map)
    if a.shape != b.shape:
        raise ValueError(f"map shapes differ: {a.shape} vs {b.shape}")
    prev = _build_pyramid_pooled(a, config.levels, "A")
    nxt = _build_pyramid_pooled(b, config.levels, "B")
    return _track_pyramids(prev, nxt, points, config)


def track(
    prev_out: NetOutput,
    next_out: NetOutput,
    points: Sequence[Keypoint],
    config: TrackConfig = TrackConfig(),
) -> list[TrackResult]:
    """Track points between two network outputs on their feature maps."""
    return track_maps(prev_out.feature_map, next_out.feature_map, points, config)


def track_point(
    prev: Pyramid,
    next_pyramid: Pyramid,
    point: Keypoint,
    guess: Optional[tuple[float, float]] = None,
    config: TrackConfig = TrackConfig(),
) -> TrackResult:
    """Track a single point between prebuilt pyramids."""
    results = _track_pyramids(
        prev, next_pyramid, [point], config,
        guesses=None if guess is None else [guess],
    )
    return results[0]


def _track_pyramids(
    prev: Pyramid,
    nxt: Pyramid,
    points: Sequence[Keypoint],
    config: TrackConfig,
    guesses: Optional[Sequence[Optional[tuple[float, float]]]] = None,
) -> list[TrackResult]:
    if len(prev.levels) != len(nxt.levels):
        raise ValueError("pyramids have different depths")
    if prev.levels[0].shape != nxt.levels[0].shape:
        raise ValueError(
            f"pyramid shapes differ: {prev.levels[0].shape} vs {nxt.levels[0].shape}"
        )
    if len(prev.levels) != config.levels:
        raise ValueError(
            f"pyramids have {len(prev.levels)} levels, config expects {config.levels}"
        )
    if not points:
        return []
    h, w, _ = prev.levels[0].shape
    xs = np.array([p.x for p in points], np.float64)
    ys = np.array([p.y for p in points], np.float64)
    if np.any(xs < 0) or np.any(xs > w - 1) or np.any(ys < 0) or np.any(ys > h - 1):
        raise ops.OutOfBoundsError("point outside level-0 bounds")
    if guesses is None:
        gdx = np.zeros_like(xs)
        gdy = np.zeros_like(ys)
    else:
        gdx = np.array(
            [0.0 if g is None else g[0] - p.x for g, p in zip(guesses, points)],
            np.float64,
        )
        gdy = np.array(
            [0.0 if g is None else g[1] - p.y for g, p in zip(guesses, points)],
            np.float64,
        )

    grads = _GradientPyramid(prev)
    vx, vy, status, residual = _run_pyramidal(prev, grads, nxt, xs, ys, gdx, gdy, config)
    if np.any(status == 6):
        raise AssertionError("LK normal matrix lost positive semi-definiteness")

    fb_error = np.full(len(points), np.nan, np.float64)
    if config.fb_threshold is not None:
        conv = status == 4
        if np.any(conv):
            # Re-track on the finest level only, seeded with the origin as
            # the initial flow (the usual VIO reverse-check configuration):
            # a wrong forward match cannot settle back onto its origin.
            back_cfg = replace(config, levels=1, fb_threshold=None)
            nxt0 = Pyramid(levels=(nxt.levels[0],))
            prev0 = Pyramid(levels=(prev.levels[0],))
            back_grads = _GradientPyramid(nxt0, tag="bwd")
            bxs = xs[conv] + vx[conv]
            bys = ys[conv] + vy[conv]
            bvx, bvy, bstatus, _ = _run_pyramidal(
                nxt0, back_grads, prev0, bxs, bys,
                xs[conv] - bxs, ys[conv] - bys, back_cfg,
            )
            err = np.hypot(bxs + bvx - xs[conv], bys + bvy - ys[conv])
            back_ok = bstatus == 4
            fb_error[conv] = np.where(back_ok, err, np.nan)
            exceeded = np.where(back_ok, err, np.inf) > config.fb_threshold
            status[np.where(conv)[0][exceeded]] = 5

    results = []
    for i, p in enumerate(points):
        st = _STATUS_FROM_CODE[int(status[i])]
        res = float(residual[i]) if math.isfinite(residual[i]) else float("nan")
        fbe = float(fb_error[i]) if math.isfinite(fb_error[i]) else None
        results.append(
            TrackResult(
                origin=p,
                tracked=(float(xs[i] + vx[i]), float(ys[i] + vy[i])),
                status=st,
                residual=res,
                fb_error=fbe,
            )
        )
    return results
