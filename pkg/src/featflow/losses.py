"""Value-level implementations of the training losses, used here as
analysis oracles over score maps, feature maps, and externally supplied
dense descriptor maps. No gradients, no training loop.

Correspondence ground truth is a known homography; every formula is
geometry-source agnostic. All sums run in float64 with a fixed order so
results are reproducible.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import ops
from .detector import Keypoint

log = logging.getLogger(__name__)

#: patterns of line_peaky_loss in component order
LINE_PATTERNS = ("vertical", "horizontal", "antidiagonal", "diagonal")


class ProjectionError(ValueError):
    """Point maps to infinity under the homography."""


class EmptyPairingError(ValueError):
    """A loss term has no usable keypoints or pairs."""


@dataclass(frozen=True)
class CorrespondenceSet:
    """Keypoints of two images plus the 3x3 homography mapping A pixel
    coordinates into B."""

    homography: np.ndarray
    points_a: tuple[Keypoint, ...]
    points_b: tuple[Keypoint, ...]

    def __post_init__(self):
        hm = np.asarray(self.homography, np.float64).reshape(3, 3)
        if abs(np.linalg.det(hm)) <= 1e-12:
            raise ValueError("homography is not invertible")
        object.__setattr__(self, "homography", hm)
        object.__setattr__(self, "points_a", tuple(self.points_a))
        object.__setattr__(self, "points_b", tuple(self.points_b))

    def swapped(self) -> "CorrespondenceSet":
        return CorrespondenceSet(
            homography=np.linalg.inv(self.homography),
            points_a=self.points_b,
            points_b=self.points_a,
        )


@dataclass(frozen=True)
class LossWeights:
    k1: float = 1.0
    k2: float = 0.5
    k3: float = 1.0
    temperature: float = 0.02
    mask_radius: int = 80
    patch_size: int = 5
    line_sigma: float = 1.0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.mask_radius < 1:
            raise ValueError("mask_radius must be >= 1")
        if self.patch_size < 3 or self.patch_size % 2 == 0:
            raise ValueError("patch_size must be odd and >= 3")


def project(point, homography) -> tuple[float, float]:
    """Homogeneous transform with perspective division."""
    hm = np.asarray(homography, np.float64).reshape(3, 3)
    v = hm @ np.array([point[0], point[1], 1.0], np.float64)
    if abs(v[2]) < 1e-12:
        raise ProjectionError(f"point {tuple(point)} maps to infinity")
    return float(v[0] / v[2]), float(v[1] / v[2])


def _pair_distances(
    points_a: Sequence[Keypoint],
    points_b: Sequence[Keypoint],
    homography: np.ndarray,
    match_radius: float,
) -> list[float]:
    """Projection distance of each A point to its nearest B point, keeping
    only pairs within match_radius of the projection."""
    dists = []
    bx = np.array([p.x for p in points_b], np.float64)
    by = np.array([p.y for p in points_b], np.float64)
    for pa in points_a:
        qx, qy = project((pa.x, pa.y), homography)
        d = np.hypot(bx - qx, by - qy)
        best = float(d.min()) if d.size else math.inf
        if best <= match_radius:
            dists.append(best)
    return dists


def reprojection_loss(corr: CorrespondenceSet, match_radius: float = 3.0) -> float:
    """Symmetric mean projection distance over pairable points."""
    fwd = _pair_distances(corr.points_a, corr.points_b, corr.homography, match_radius)
    inv = np.linalg.inv(corr.homography)
    bwd = _pair_distances(corr.points_b, corr.points_a, inv, match_radius)
    if not fwd or not bwd:
        raise EmptyPairingError(
            f"no pairable points within {match_radius} px "
            f"(A->B: {len(fwd)}, B->A: {len(bwd)})"
        )
    return float(np.sum(fwd) / len(fwd) + np.sum(bwd) / len(bwd))


def _patch_grid(score_map: np.ndarray, keypoint: Keypoint, n: int):
    """Integer patch coordinates centered on the keypoint's pixel, plus the
    float64 score patch. Raises if the patch leaves the map."""
    s = ops.as_map(score_map, channels=1)[:, :, 0]
    h, w = s.shape
    half = n // 2
    cx = int(round(keypoint.x))
    cy = int(round(keypoint.y))
    if cx - half < 0 or cy - half < 0 or cx + half > w - 1 or cy + half > h - 1:
        raise ops.OutOfBoundsError(
            f"{n}x{n} patch at ({keypoint.x}, {keypoint.y}) leaves the {w}x{h} map"
        )
    xs = np.arange(cx - half, cx + half + 1, dtype=np.float64)
    ys = np.arange(cy - half, cy + half + 1, dtype=np.float64)
    patch = s[cy - half : cy + half + 1, cx - half : cx + half + 1].astype(np.float64)
    return xs[None, :], ys[:, None], patch


def peaky_loss(score_map: np.ndarray, keypoint: Keypoint, n: int = 5) -> float:
    """Distance-weighted mean score over the NxN patch: far-from-keypoint
    mass is penalized, an impulse at the keypoint costs 0."""
    xs, ys, patch = _patch_grid(score_map, keypoint, n)
    d = np.sqrt((xs - keypoint.x) ** 2 + (ys - keypoint.y) ** 2)
    return float(np.sum(d * patch) / (n * n))


def _line_weights(xs, ys, keypoint: Keypoint, sigma: float) -> np.ndarray:
    """Gaussian weights of the four line patterns (LINE_PATTERNS order) on
    the patch grid: small distance to the line means weight near 1."""
    inv = 1.0 / (2.0 * sigma * sigma)
    gx, gy = np.broadcast_arrays(xs, ys)
    d1 = np.abs(gx - keypoint.x)  # vertical line x = px
    d2 = np.abs(gy - keypoint.y)  # horizontal line y = py
    d3 = np.abs(gx + gy - keypoint.x - keypoint.y)  # antidiagonal
    d4 = np.abs(gx - gy - keypoint.x + keypoint.y)  # diagonal
    return np.stack([np.exp(-d * d * inv) for d in (d1, d2, d3, d4)])


def line_peaky_components(
    score_map: np.ndarray, keypoint: Keypoint, n: int = 5, line_sigma: float = 1.0
) -> np.ndarray:
    """The four line-pattern values whose maximum is line_peaky_loss,
    ordered per LINE_PATTERNS."""
    xs, ys, patch = _patch_grid(score_map, keypoint, n)
    d = np.sqrt((xs - keypoint.x) ** 2 + (ys - keypoint.y) ** 2)
    w = _line_weights(xs, ys, keypoint, line_sigma)
    return np.sum(w * (d * patch)[None, :, :], axis=(1, 2)) / (n * n)


def line_peaky_loss(
    score_map: np.ndarray, keypoint: Keypoint, n: int = 5, line_sigma: float = 1.0
) -> float:
    """Maximum of the four line-weighted peaky penalties, raising the cost
    of score mass strung out along a line through the keypoint."""
    return float(line_peaky_components(score_map, keypoint, n, line_sigma).max())


def similarity_map(descriptor: np.ndarray, desc_map: np.ndarray) -> np.ndarray:
    """Per-pixel dot product of a unit descriptor with a unit descriptor
    map -> (H, W, 1)."""
    d = np.asarray(descriptor, np.float64).reshape(-1)
    m = ops.as_map(desc_map)
    if m.shape[2] != d.shape[0]:
        raise ValueError(
            f"descriptor dim {d.shape[0]} does not match map dim {m.shape[2]}"
        )
    sim = m.astype(np.float64) @ d
    return sim[:, :, None]


def match_probability_exp(sim_map: np.ndarray, t: float) -> np.ndarray:
    """exp((sim - 1)/t): 1 exactly at perfect similarity, vanishing below."""
    if t <= 0:
        raise ValueError("t must be > 0")
    s = np.asarray(sim_map, np.float64)
    return np.exp((s - 1.0) / t)


def _bilinear_f64(arr: np.ndarray, x: float, y: float) -> np.ndarray:
    """Float64 bilinear sample of an (H, W, ...) array at in-bounds (x, y)."""
    h, w = arr.shape[0], arr.shape[1]
    x0 = min(int(x), w - 2) if w > 1 else 0
    y0 = min(int(y), h - 2) if h > 1 else 0
    fx = x - x0
    fy = y - y0
    x1 = min(x0 + 1, w - 1)
    y1 = min(y0 + 1, h - 1)
    a = arr.astype(np.float64, copy=False)
    return (
        (1 - fy) * ((1 - fx) * a[y0, x0] + fx * a[y0, x1])
        + fy * ((1 - fx) * a[y1, x0] + fx * a[y1, x1])
    )


def _sample_unit_descriptor(desc_map: np.ndarray, x: float, y: float) -> np.ndarray:
    """Bilinear descriptor sample, re-normalized to unit length (interpolated
    unit vectors land slightly inside the sphere)."""
    d = np.atleast_1d(_bilinear_f64(desc_map, x, y))
    n = np.linalg.norm(d)
    return d / n if n > 0 else d


def _inside(shape, x: float, y: float) -> bool:
    h, w = shape[0], shape[1]
    return 0.0 <= x <= w - 1 and 0.0 <= y <= h - 1


def reliability_loss(
    corr: CorrespondenceSet,
    score_maps: tuple[np.ndarray, np.ndarray],
    desc_maps: tuple[np.ndarray, np.ndarray],
    t: float = 0.02,
) -> float:
    """Score-weighted mean unreliability of A's keypoints (direction A->B):
    a keypoint is reliable when its exp-normalized similarity map, sampled
    at the projection, is near 1. Use corr.swapped() for the B->A term."""
    score_a, score_b = (ops.as_map(s, channels=1) for s in score_maps)
    desc_a, desc_b = (ops.as_map(d) for d in desc_maps)
    if not corr.points_a:
        raise EmptyPairingError("no keypoints in image A")
    weights = []
    unreliability = []
    skipped = 0
    for pa in corr.points_a:
        qx, qy = project((pa.x, pa.y), corr.homography)
        if not _inside(score_b.shape, qx, qy):
            skipped += 1
            continue
        d_pa = _sample_unit_descriptor(desc_a, pa.x, pa.y)
        sim = similarity_map(d_pa, desc_b)[:, :, 0]
        prob = match_probability_exp(sim, t)
        r = float(_bilinear_f64(prob, qx, qy))
        s_pab = float(_bilinear_f64(score_b[:, :, 0], qx, qy))
        weights.append(pa.score * s_pab)
        unreliability.append(1.0 - r)
    if not weights:
        raise EmptyPairingError("no keypoint projects inside image B")
    if skipped:
        log.debug("reliability_loss: skipped %d projections outside B", skipped)
    wsum = float(np.sum(weights))
    n_a = len(corr.points_a)
    terms = [w / wsum * u for w, u in zip(weights, unreliability)]
    return float(np.sum(terms) / n_a)


def keypoint_loss(
    corr: CorrespondenceSet,
    score_maps: tuple[np.ndarray, np.ndarray],
    desc_maps: tuple[np.ndarray, np.ndarray],
    weights: LossWeights = LossWeights(),
    match_radius: float = 3.0,
) -> float:
    """k1 * reprojection + k2 * mean line-peaky over both images' keypoints
    + k3 * mean of the two directional reliability losses."""
    rp = reprojection_loss(corr, match_radius)
    lpk_sum = 0.0
    for pa in corr.points_a:
        lpk_sum += line_peaky_loss(
            score_maps[0], pa, weights.patch_size, weights.line_sigma
        )
    for pb in corr.points_b:
        lpk_sum += line_peaky_loss(
            score_maps[1], pb, weights.patch_size, weights.line_sigma
        )
    n_total = len(corr.points_a) + len(corr.points_b)
    if n_total == 0:
        raise EmptyPairingError("no keypoints in either image")
    rel_a = reliability_loss(corr, score_maps, desc_maps, weights.temperature)
    swapped = corr.swapped()
    rel_b = reliability_loss(
        swapped, (score_maps[1], score_maps[0]), (desc_maps[1], desc_maps[0]),
        weights.temperature,
    )
    return (
        weights.k1 * rp
        + weights.k2 * (lpk_sum / n_total)
        + weights.k3 * 0.5 * (rel_a + rel_b)
    )


def match_probability_softmax(
    descriptor: np.ndarray,
    desc_map: np.ndarray,
    t: float,
    mask_center: tuple[float, float] | None = None,
    mask_radius: int | None = None,
) -> np.ndarray:
    """Softmax over all H*W positions of (sim - 1)/t: a matching-probability
    map summing to 1. With a mask, similarities outside the Chebyshev box of
    the given radius around mask_center are zeroed first, so masked-out
    positions contribute constant exp(-1/t) partition terms."""
    if t <= 0:
        raise ValueError("t must be > 0")
    sim = similarity_map(descriptor, desc_map)[:, :, 0]
    if mask_radius is not None:
        if mask_center is None:
            raise ValueError("mask_radius requires mask_center")
        h, w = sim.shape
        ygrid, xgrid = np.mgrid[0:h, 0:w].astype(np.float64)
        mask = (
            np.maximum(np.abs(xgrid - mask_center[0]), np.abs(ygrid - mask_center[1]))
            < mask_radius
        ).astype(np.float64)
        z = (mask * sim - 1.0) / t
    else:
        z = (sim - 1.0) / t
    z -= z.max()
    e = np.exp(z)
    return (e / e.sum())[:, :, None]


def _softmax_neglog_term(
    desc_map_src: np.ndarray,
    desc_map_dst: np.ndarray,
    points: Sequence[Keypoint],
    homography: np.ndarray,
    t: float,
    mask_radius: int | None,
) -> tuple[float, int, int]:
    """Sum of -ln softmax-probabilities at the projected positions for one
    direction. Returns (sum, used, skipped)."""
    total = 0.0
    used = 0
    skipped = 0
    dst = ops.as_map(desc_map_dst)
    tiny = np.finfo(np.float64).tiny
    for p in points:
        qx, qy = project((p.x, p.y), homography)
        if not _inside(dst.shape, qx, qy):
            skipped += 1
            continue
        d = _sample_unit_descriptor(desc_map_src, p.x, p.y)
        prob_map = match_probability_softmax(
            d, dst, t, mask_center=(p.x, p.y), mask_radius=mask_radius
        )[:, :, 0]
        prob = float(_bilinear_f64(prob_map, qx, qy))
        total += -math.log(max(prob, tiny))
        used += 1
    return total, used, skipped


def nre_loss(
    corr: CorrespondenceSet,
    desc_maps: tuple[np.ndarray, np.ndarray],
    t: float = 0.02,
) -> float:
    """Symmetric mean negative log of the softmax matching probability at
    the ground-truth projections."""
    return _nre_impl(corr, desc_maps, t, mask_radius=None)


def mnre_loss(
    corr: CorrespondenceSet,
    feature_maps: tuple[np.ndarray, np.ndarray],
    t: float = 0.02,
    d: int = 80,
) -> float:
    """Masked variant: similarities outside the Chebyshev-radius-d box around
    the source keypoint are zeroed before the softmax, so those positions
    contribute constant exp(-1/t) partition terms and the loss only responds
    to local structure."""
    if d < 1:
        raise ValueError("mask radius d must be >= 1")
    return _nre_impl(corr, feature_maps, t, mask_radius=d)


def _nre_impl(corr, maps, t, mask_radius):
    if t <= 0:
        raise ValueError("t must be > 0")
    if not corr.points_a and not corr.points_b:
        raise EmptyPairingError("no keypoints in either image")
    map_a, map_b = (ops.as_map(m) for m in maps)
    fwd, used_f, skip_f = _softmax_neglog_term(
        map_a, map_b, corr.points_a, corr.homography, t, mask_radius
    )
    inv = np.linalg.inv(corr.homography)
    bwd, used_b, skip_b = _softmax_neglog_term(
        map_b, map_a, corr.points_b, inv, t, mask_radius
    )
    if used_f + used_b == 0:
        raise EmptyPairingError("every projection lands outside the other image")
    if skip_f or skip_b:
        log.debug(
            "nre: skipped %d A->B and %d B->A projections outside bounds",
            skip_f,
            skip_b,
        )
    return (fwd + bwd) / (used_f + used_b)
