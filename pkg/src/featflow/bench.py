"""Pipeline stage timing, including the numba-vs-numpy backend comparison."""

from __future__ import annotations

import time
from typing import Sequence

import numpy as np

from . import backend, tracking
from .detector import DetectorConfig, detect
from .network import NetWeights, forward
from .tracking import TrackConfig, build_pyramid

STAGES = ("forward", "detect", "pyramid", "track")


def _median(values: Sequence[float]) -> float:
    return float(np.median(np.asarray(values)))


def run_pipeline_bench(
    image: np.ndarray,
    weights: NetWeights,
    detector_config: DetectorConfig,
    track_config: TrackConfig,
    iterations: int = 7,
    warmup: int = 1,
) -> dict:
    """Median wall time per stage for forward -> detect -> pyramid -> track;
    the track stage re-tracks the detected points against the same frame on
    the pyramid built in the previous stage."""
    times: dict[str, list[float]] = {s: [] for s in STAGES}
    n_points = 0
    for it in range(warmup + iterations):
        t0 = time.perf_counter()
        out = forward(image, weights)
        t1 = time.perf_counter()
        points = detect(out.score_map, detector_config)
        t2 = time.perf_counter()
        pyramid = build_pyramid(out.feature_map, track_config.levels)
        t3 = time.perf_counter()
        tracking._track_pyramids(pyramid, pyramid, points, track_config)
        t4 = time.perf_counter()
        if it < warmup:
            continue
        n_points = len(points)
        times["forward"].append((t1 - t0) * 1e3)
        times["detect"].append((t2 - t1) * 1e3)
        times["pyramid"].append((t3 - t2) * 1e3)
        times["track"].append((t4 - t3) * 1e3)
    stage_ms = {s: _median(times[s]) for s in STAGES}
    stage_ms["total"] = float(sum(stage_ms[s] for s in STAGES))
    return {
        "backend": backend.active_backend(),
        "iterations": iterations,
        "image_height": image.shape[0],
        "image_width": image.shape[1],
        "points": n_points,
        "stage_ms": stage_ms,
    }


def compare_backends(
    image: np.ndarray,
    weights: NetWeights,
    detector_config: DetectorConfig,
    track_config: TrackConfig,
    iterations: int = 7,
) -> dict:
    """Run the stage benchmark once per available backend."""
    results = {}
    saved = backend._override
    try:
        for name in backend.available_backends():
            backend.set_backend(name)
            results[name] = run_pipeline_bench(
                image, weights, detector_config, track_config, iterations
            )
    finally:
        backend.set_backend(saved)
    return results
