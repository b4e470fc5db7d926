"""Keypoint extraction from the score map: strict 3x3 NMS, score threshold,
border margin, and greedy minimum-spacing selection for uniform coverage
(the goodFeaturesToTrack-style min-distance rule)."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import backend, ops


class Keypoint(NamedTuple):
    x: float
    y: float
    score: float


@dataclass(frozen=True)
class DetectorConfig:
    max_points: int = 300
    score_threshold: float = 0.1
    min_interval: float = 5.0
    border: int = 8

    def __post_init__(self):
        if self.max_points < 1:
            raise ValueError("max_points must be >= 1")
        if self.min_interval < 0:
            raise ValueError("min_interval must be >= 0")
        if not (0.0 <= self.score_threshold < 1.0):
            raise ValueError("score_threshold must be in [0, 1)")
        if self.border < 0:
            raise ValueError("border must be >= 0")


def _kernels():
    if backend.use_numba():
        from . import _kernels_numba as k
    else:
        from . import _kernels_numpy as k
    return k


def nms_3x3(score_map: np.ndarray) -> list[Keypoint]:
    """Integer-located points strictly greater than all 8 neighbors.
    Border pixels are never candidates."""
    s = ops.as_map(score_map, channels=1)[:, :, 0]
    ys, xs = _kernels().nms_3x3(s)
    return [Keypoint(float(x), float(y), float(s[y, x])) for y, x in zip(ys, xs)]


def detect(score_map: np.ndarray, config: DetectorConfig = DetectorConfig()) -> list[Keypoint]:
    """NMS -> threshold -> border margin -> greedy descending-score selection
    with a Chebyshev spacing of at least min_interval, capped at max_points.
    Result sorted by descending score (ties: smaller y, then smaller x)."""
    s = ops.as_map(score_map, channels=1)[:, :, 0]
    h, w = s.shape
    k = _kernels()
    ys, xs = k.nms_3x3(s)
    if ys.shape[0] == 0:
        return []
    scores = s[ys, xs]

    keep = scores >= config.score_threshold
    b = config.border
    if b > 0:
        keep &= (ys >= b) & (ys <= h - 1 - b) & (xs >= b) & (xs <= w - 1 - b)
    ys, xs, scores = ys[keep], xs[keep], scores[keep]
    if ys.shape[0] == 0:
        return []

    order = np.lexsort((xs, ys, -scores.astype(np.float64)))
    ys, xs, scores = ys[order], xs[order], scores[order]

    # Largest integer distance still violating the spacing rule.
    radius = int(math.ceil(config.min_interval - 1e-12)) - 1
    sel = k.greedy_min_interval(ys, xs, h, w, radius, config.max_points)
    return [
        Keypoint(float(xs[i]), float(ys[i]), float(scores[i])) for i in sel
    ]
