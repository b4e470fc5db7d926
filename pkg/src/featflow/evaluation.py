"""Desk-scale evaluation protocols: repeatability under a known homography,
correct tracking ratio, per-frame rejection rate over sequences, and the
seeded synthetic pair/sequence generators that stand in for recorded data.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from . import ops
from .detector import DetectorConfig, Keypoint, detect
from .losses import project
from .network import NetOutput
from .tracking import TrackConfig, TrackResult, TrackStatus, track


class PairKind(enum.Enum):
    TRANSLATION = "translation"
    HOMOGRAPHY = "homography"
    SPOTLIGHT = "spotlight"
    BLUR = "blur"


@dataclass(frozen=True)
class EvalPair:
    image_a: np.ndarray
    image_b: np.ndarray
    homography: np.ndarray  # ground-truth warp A -> B

    def __post_init__(self):
        hm = np.asarray(self.homography, np.float64).reshape(3, 3)
        if abs(np.linalg.det(hm)) <= 1e-12:
            raise ValueError("homography is not invertible")
        object.__setattr__(self, "homography", hm)


@dataclass
class MetricsReport:
    repeatability: float
    correct_tracking_ratio: float
    rejection_rate: float
    counts: dict = field(default_factory=dict)
    timing_ms: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "repeatability": self.repeatability,
            "correct_tracking_ratio": self.correct_tracking_ratio,
            "rejection_rate": self.rejection_rate,
            "counts": dict(self.counts),
            "timing_ms": dict(self.timing_ms),
        }


CSV_COLUMNS = (
    "repeatability",
    "correct_tracking_ratio",
    "rejection_rate",
    "detected_a",
    "detected_b",
    "repeated",
    "tracked",
    "correct",
    "rejected",
)


def repeatability(
    pair: EvalPair,
    keypoints_a: Sequence[Keypoint],
    keypoints_b: Sequence[Keypoint],
    threshold: float = 3.0,
) -> float:
    """Fraction of keypoints re-found under the ground-truth warp: one-to-one
    greedy nearest-first assignment between projected A points and B points,
    denominated by the smaller per-image count within the shared region."""
    hm = pair.homography
    inv = np.linalg.inv(hm)
    h_b, w_b = pair.image_b.shape[:2]
    h_a, w_a = pair.image_a.shape[:2]

    proj_a = []
    for p in keypoints_a:
        q = project((p.x, p.y), hm)
        if 0.0 <= q[0] <= w_b - 1 and 0.0 <= q[1] <= h_b - 1:
            proj_a.append(q)
    count_b = 0
    for p in keypoints_b:
        q = project((p.x, p.y), inv)
        if 0.0 <= q[0] <= w_a - 1 and 0.0 <= q[1] <= h_a - 1:
            count_b += 1
    denom = min(len(proj_a), count_b)
    if denom == 0:
        raise ValueError("no keypoints in the shared visible region")

    candidates = []
    for ia, (qx, qy) in enumerate(proj_a):
        for ib, pb in enumerate(keypoints_b):
            d = float(np.hypot(pb.x - qx, pb.y - qy))
            if d < threshold:
                candidates.append((d, ia, ib))
    candidates.sort()
    used_a: set[int] = set()
    used_b: set[int] = set()
    repeated = 0
    for d, ia, ib in candidates:
        if ia in used_a or ib in used_b:
            continue
        used_a.add(ia)
        used_b.add(ib)
        repeated += 1
    return repeated / denom


def correct_tracking_ratio(
    pair: EvalPair, results: Sequence[TrackResult], tolerance: float = 3.0
) -> float:
    """Fraction of attempted tracks that converged within tolerance of the
    ground-truth projection."""
    if not results:
        raise ValueError("no track results to evaluate")
    correct = 0
    for r in results:
        if r.status != TrackStatus.CONVERGED:
            continue
        gx, gy = project((r.origin.x, r.origin.y), pair.homography)
        if np.hypot(r.tracked[0] - gx, r.tracked[1] - gy) < tolerance:
            correct += 1
    return correct / len(results)


@dataclass
class RejectionReport:
    rates: list[float]
    attempted: list[int]
    rejected: list[int]


def rejection_rate(
    outputs: Sequence[NetOutput],
    detector_config: DetectorConfig = DetectorConfig(),
    track_config: TrackConfig = TrackConfig(),
    replenish_floor: Optional[int] = None,
) -> RejectionReport:
    """Track keypoints frame to frame with the forward-backward check and
    report the rejected fraction per transition. Points are re-detected when
    the surviving set falls below the floor (half of max_points by default),
    keeping the configured spacing to existing survivors."""
    if len(outputs) < 2:
        raise ValueError("need at least 2 frames")
    floor = (
        replenish_floor
        if replenish_floor is not None
        else max(1, detector_config.max_points // 2)
    )
    points = detect(outputs[0].score_map, detector_config)
    rates: list[float] = []
    attempted: list[int] = []
    rejected: list[int] = []
    for i in range(1, len(outputs)):
        n_att = len(points)
        if n_att == 0:
            rates.append(1.0)
            attempted.append(0)
            rejected.append(0)
            survivors: list[Keypoint] = []
        else:
            results = track(outputs[i - 1], outputs[i], points, track_config)
            survivors = [
                Keypoint(r.tracked[0], r.tracked[1], r.origin.score)
                for r in results
                if r.status == TrackStatus.CONVERGED
            ]
            n_rej = n_att - len(survivors)
            rates.append(n_rej / n_att)
            attempted.append(n_att)
            rejected.append(n_rej)
        if len(survivors) < floor:
            survivors = _replenish(
                survivors, outputs[i].score_map, detector_config
            )
        points = survivors
    return RejectionReport(rates=rates, attempted=attempted, rejected=rejected)


def _replenish(
    survivors: list[Keypoint], score_map: np.ndarray, config: DetectorConfig
) -> list[Keypoint]:
    """Top survivors up with fresh detections that keep the spacing rule."""
    fresh = detect(score_map, config)
    merged = list(survivors)
    for cand in fresh:
        if len(merged) >= config.max_points:
            break
        ok = all(
            max(abs(cand.x - p.x), abs(cand.y - p.y)) >= config.min_interval
            for p in merged
        )
        if ok:
            merged.append(cand)
    return merged


def warp_image(image: np.ndarray, homography: np.ndarray) -> np.ndarray:
    """Backward-warp: output(q) = image(H^-1 q), bilinear, edge-clamped."""
    img = ops.as_map(image)
    h, w, _ = img.shape
    inv = np.linalg.inv(np.asarray(homography, np.float64).reshape(3, 3))
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    denom = inv[2, 0] * xs + inv[2, 1] * ys + inv[2, 2]
    sx = (inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]) / denom
    sy = (inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]) / denom
    sx = np.clip(sx, 0.0, w - 1.0)
    sy = np.clip(sy, 0.0, h - 1.0)
    x0 = np.clip(sx.astype(np.int64), 0, w - 2)
    y0 = np.clip(sy.astype(np.int64), 0, h - 2)
    fx = (sx - x0)[:, :, None].astype(np.float32)
    fy = (sy - y0)[:, :, None].astype(np.float32)
    a = img[y0, x0]
    b = img[y0, x0 + 1]
    c = img[y0 + 1, x0]
    d = img[y0 + 1, x0 + 1]
    return (1 - fy) * ((1 - fx) * a + fx * b) + fy * ((1 - fx) * c + fx * d)


def _textured_base(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    """Seeded band-limited noise in [0.1, 0.9] with structure at several
    scales (so coarse pyramid levels keep gradients) and mild channel
    variation."""
    gray = (
        gaussian_filter(rng.standard_normal((height, width)), 1.5)
        + 0.7 * gaussian_filter(rng.standard_normal((height, width)), 4.0)
        + 0.5 * gaussian_filter(rng.standard_normal((height, width)), 10.0)
    )
    gray = (gray - gray.min()) / max(np.ptp(gray), 1e-9)
    img = np.empty((height, width, 3), np.float32)
    for ch in range(3):
        tint = gaussian_filter(rng.standard_normal((height, width)), sigma=3.0)
        tint = (tint - tint.min()) / max(np.ptp(tint), 1e-9)
        img[:, :, ch] = 0.1 + 0.8 * np.clip(0.85 * gray + 0.15 * tint, 0.0, 1.0)
    return img


def spotlight_gain(
    height: int,
    width: int,
    center: tuple[float, float],
    radii: tuple[float, float],
    inner_gain: float = 2.5,
    outer_gain: float = 0.6,
    edge_softness: float = 0.08,
) -> np.ndarray:
    """Elliptical multiplicative brightness field, clipped to [0.2, 3.0]."""
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    e = ((xs - center[0]) / radii[0]) ** 2 + ((ys - center[1]) / radii[1]) ** 2
    s = 1.0 / (1.0 + np.exp((e - 1.0) / edge_softness))
    gain = outer_gain + (inner_gain - outer_gain) * s
    return np.clip(gain, 0.2, 3.0).astype(np.float32)[:, :, None]


def synth_pair(
    seed: int, kind: PairKind | str, height: int = 256, width: int = 256
) -> EvalPair:
    """Deterministic synthetic pair of the requested kind with exact
    ground-truth homography."""
    kind = PairKind(kind)
    rng = np.random.default_rng(seed)
    base = _textured_base(rng, height, width)
    eye = np.eye(3)
    if kind is PairKind.TRANSLATION:
        tx = float(rng.uniform(-8.0, 8.0))
        ty = float(rng.uniform(-8.0, 8.0))
        hm = np.array([[1, 0, tx], [0, 1, ty], [0, 0, 1]], np.float64)
        return EvalPair(base, warp_image(base, hm), hm)
    if kind is PairKind.HOMOGRAPHY:
        theta = float(rng.uniform(-0.05, 0.05))
        scale = float(rng.uniform(0.97, 1.03))
        tx = float(rng.uniform(-5.0, 5.0))
        ty = float(rng.uniform(-5.0, 5.0))
        px = float(rng.uniform(-4e-5, 4e-5))
        py = float(rng.uniform(-4e-5, 4e-5))
        cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
        to_center = np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1]], np.float64)
        back = np.array([[1, 0, cx], [0, 1, cy], [0, 0, 1]], np.float64)
        core = np.array(
            [
                [scale * np.cos(theta), -scale * np.sin(theta), tx],
                [scale * np.sin(theta), scale * np.cos(theta), ty],
                [px, py, 1.0],
            ],
            np.float64,
        )
        hm = back @ core @ to_center
        return EvalPair(base, warp_image(base, hm), hm)
    if kind is PairKind.SPOTLIGHT:
        center = (
            float(rng.uniform(0.3, 0.7) * width),
            float(rng.uniform(0.3, 0.7) * height),
        )
        radii = (
            float(rng.uniform(0.2, 0.35) * width),
            float(rng.uniform(0.2, 0.35) * height),
        )
        gain = spotlight_gain(height, width, center, radii)
        lit = np.clip(base * gain, 0.0, 1.0).astype(np.float32)
        return EvalPair(base, lit, eye)
    if kind is PairKind.BLUR:
        blurred = np.empty_like(base)
        for ch in range(3):
            blurred[:, :, ch] = gaussian_filter(base[:, :, ch], sigma=1.2)
        return EvalPair(base, blurred.astype(np.float32), eye)
    raise ValueError(f"unknown pair kind {kind}")


def synth_spotlight_sequence(
    seed: int, n_frames: int, height: int = 256, width: int = 256
) -> list[np.ndarray]:
    """Static textured scene under a spotlight drifting across it: geometry
    is identity between frames while brightness changes everywhere the
    ellipse moves."""
    rng = np.random.default_rng(seed)
    base = _textured_base(rng, height, width)
    frames = []
    radii = (0.28 * width, 0.28 * height)
    for i in range(n_frames):
        u = i / max(n_frames - 1, 1)
        center = (0.2 * width + 0.6 * width * u, 0.35 * height + 0.3 * height * u)
        gain = spotlight_gain(height, width, center, radii)
        frames.append(np.clip(base * gain, 0.0, 1.0).astype(np.float32))
    return frames


def gradient_features(image: np.ndarray, epsilon: float = 1e-6) -> np.ndarray:
    """Unit-normalized grayscale gradient directions: a handcrafted feature
    map that barely responds to smooth multiplicative brightness changes,
    used as a stand-in oracle for learned illumination-invariant features."""
    img = ops.as_map(image)
    gray = img.mean(axis=2, keepdims=True)
    gx = np.empty_like(gray)
    gy = np.empty_like(gray)
    gx[:, 1:-1] = (gray[:, 2:] - gray[:, :-2]) * 0.5
    gx[:, 0] = gray[:, 1] - gray[:, 0]
    gx[:, -1] = gray[:, -1] - gray[:, -2]
    gy[1:-1, :] = (gray[2:, :] - gray[:-2, :]) * 0.5
    gy[0, :] = gray[1, :] - gray[0, :]
    gy[-1, :] = gray[-1, :] - gray[-2, :]
    feat = np.concatenate([gx, gy], axis=2)
    return ops.l2_normalize_channels(feat, epsilon)


def as_netoutput(feature_map: np.ndarray, score_map: np.ndarray) -> NetOutput:
    """Wrap arbitrary maps (e.g. raw RGB channels) as a NetOutput so the
    tracking and rejection pipelines can run on them."""
    return NetOutput(
        score_map=ops.as_map(score_map, channels=1),
        feature_map=ops.as_map(feature_map),
    )
