"""Command-line surface: detect, track, eval, bench, plus the forward,
synth and init-weights helpers.

Exit codes: 0 success, 2 input error, 3 usage/shape error, 4 internal
invariant violation. Config precedence is CLI flag > --config file >
built-in default; every JSON report echoes the effective config.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict

import numpy as np

from . import backend, imgio, ops
from .bench import compare_backends, run_pipeline_bench
from .detector import DetectorConfig, detect
from .evaluation import (
    EvalPair,
    PairKind,
    correct_tracking_ratio,
    repeatability,
    synth_pair,
)
from .network import (
    NetOutput,
    WeightsFormatError,
    forward,
    load_weights,
    random_weights,
    save_weights,
)
from .tracking import TrackConfig, TrackStatus, build_pyramid, track

SCHEMA_VERSION = 1

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_USAGE = 3
EXIT_INTERNAL = 4


class InputError(Exception):
    pass


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # usage problems exit 3, not argparse's default 2
        self.print_usage(sys.stderr)
        raise UsageError(message)


DETECTOR_KEYS = ("max_points", "score_threshold", "min_interval", "border")
TRACKER_KEYS = (
    "window_radius",
    "max_iterations",
    "epsilon",
    "levels",
    "min_eigen_threshold",
    "fb_threshold",
)


def _add_common(p: argparse.ArgumentParser, weights_required: bool = True):
    p.add_argument("--weights", required=weights_required, help="weights file (LETW)")
    p.add_argument("--config", help="JSON config file (flags override it)")
    p.add_argument("--max-points", type=int, dest="max_points")
    p.add_argument("--score-threshold", type=float, dest="score_threshold")
    p.add_argument("--min-interval", type=float, dest="min_interval")
    p.add_argument("--border", type=int)
    p.add_argument("--window-radius", type=int, dest="window_radius")
    p.add_argument("--max-iterations", type=int, dest="max_iterations")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--levels", type=int)
    p.add_argument("--min-eigen-threshold", type=float, dest="min_eigen_threshold")
    p.add_argument(
        "--fb-threshold",
        dest="fb_threshold",
        help="forward-backward threshold in px, or 'off'",
    )
    p.add_argument(
        "--inference-scale",
        type=float,
        dest="inference_scale",
        help="run the network at this fraction of the input resolution (0, 1]",
    )
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--output", "-o", help="output file (default stdout)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--backend", choices=("numba", "numpy"))


def _load_config_file(path) -> dict:
    try:
        with open(path) as f:
            data = json.load(f)
    except OSError as e:
        raise InputError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise InputError(f"config {path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise InputError(f"config {path} must hold a JSON object")
    return data


def _effective_configs(args) -> tuple[DetectorConfig, TrackConfig, float]:
    file_cfg = _load_config_file(args.config) if args.config else {}

    def pick(key, default):
        v = getattr(args, key, None)
        if v is not None:
            return v
        return file_cfg.get(key, default)

    det_defaults = DetectorConfig()
    trk_defaults = TrackConfig()
    fb = pick("fb_threshold", trk_defaults.fb_threshold)
    if isinstance(fb, str):
        fb = None if fb.lower() in ("off", "none", "disabled") else float(fb)
    try:
        det = DetectorConfig(
            max_points=int(pick("max_points", det_defaults.max_points)),
            score_threshold=float(
                pick("score_threshold", det_defaults.score_threshold)
            ),
            min_interval=float(pick("min_interval", det_defaults.min_interval)),
            border=int(pick("border", det_defaults.border)),
        )
        trk = TrackConfig(
            window_radius=int(pick("window_radius", trk_defaults.window_radius)),
            max_iterations=int(pick("max_iterations", trk_defaults.max_iterations)),
            epsilon=float(pick("epsilon", trk_defaults.epsilon)),
            levels=int(pick("levels", trk_defaults.levels)),
            min_eigen_threshold=float(
                pick("min_eigen_threshold", trk_defaults.min_eigen_threshold)
            ),
            fb_threshold=fb,
        )
    except ValueError as e:
        raise UsageError(str(e)) from e
    scale = float(pick("inference_scale", 1.0))
    if not (0.0 < scale <= 1.0):
        raise UsageError(f"inference_scale must be in (0, 1], got {scale}")
    return det, trk, scale


def _config_echo(args, det: DetectorConfig, trk: TrackConfig, scale: float) -> dict:
    cfg = {"detector": asdict(det), "tracker": asdict(trk)}
    cfg["inference_scale"] = scale
    cfg["seed"] = args.seed
    cfg["threads"] = args.threads
    cfg["backend"] = backend.active_backend()
    return cfg


def _load_weights_checked(path):
    try:
        return load_weights(path)
    except FileNotFoundError as e:
        raise InputError(f"weights file not found: {path}") from e
    except WeightsFormatError as e:
        raise InputError(str(e)) from e


def _load_image_checked(path) -> np.ndarray:
    try:
        return imgio.load_image(path)
    except FileNotFoundError as e:
        raise InputError(f"image not found: {path}") from e
    except imgio.ImageReadError as e:
        raise InputError(str(e)) from e


def _emit(args, text: str):
    if args.output:
        with open(args.output, "w") as f:
            f.write(text)
    else:
        sys.stdout.write(text)


def _scaled_forward(
    image: np.ndarray, weights, scale: float
) -> tuple[NetOutput, float]:
    """Run the network, optionally at reduced resolution. Returns the output
    plus the factor mapping output coordinates back to native pixels."""
    if scale >= 1.0:
        return forward(image, weights), 1.0
    h, w = image.shape[:2]
    nh = max(8, int(round(h * scale)))
    nw = max(8, int(round(w * scale)))
    small = imgio.resize_bilinear(image, nh, nw)
    # native x = output x * (w-1)/(nw-1) under corner-aligned resize
    fx = (w - 1) / (nw - 1) if nw > 1 else 1.0
    fy = (h - 1) / (nh - 1) if nh > 1 else 1.0
    if abs(fx - fy) > 0.1 * max(fx, fy):
        raise UsageError("inference_scale produces badly anisotropic sampling")
    return forward(small, weights), float((fx + fy) / 2.0)


def cmd_detect(args) -> int:
    weights = _load_weights_checked(args.weights)
    image = _load_image_checked(args.image)
    det, trk, scale = _effective_configs(args)
    out, factor = _scaled_forward(image, weights, scale)
    points = detect(out.score_map, det)
    if args.format == "csv":
        lines = ["x,y,score"]
        for p in points:
            lines.append(f"{p.x * factor!r},{p.y * factor!r},{p.score!r}")
        _emit(args, "\n".join(lines) + "\n")
    else:
        doc = {
            "schema_version": SCHEMA_VERSION,
            "config": _config_echo(args, det, trk, scale),
            "keypoints": [
                {"x": p.x * factor, "y": p.y * factor, "score": p.score}
                for p in points
            ],
        }
        _emit(args, json.dumps(doc, sort_keys=True, indent=2) + "\n")
    return EXIT_OK


def cmd_track(args) -> int:
    weights = _load_weights_checked(args.weights)
    image_a = _load_image_checked(args.image_a)
    image_b = _load_image_checked(args.image_b)
    if image_a.shape != image_b.shape:
        raise UsageError(
            f"image dimensions differ: {image_a.shape} vs {image_b.shape}"
        )
    det, trk, scale = _effective_configs(args)
    out_a, factor = _scaled_forward(image_a, weights, scale)
    out_b, _ = _scaled_forward(image_b, weights, scale)
    points = detect(out_a.score_map, det)
    results = track(out_a, out_b, points, trk)
    records = []
    for r in results:
        records.append(
            {
                "x": r.origin.x * factor,
                "y": r.origin.y * factor,
                "score": r.origin.score,
                "tracked_x": r.tracked[0] * factor,
                "tracked_y": r.tracked[1] * factor,
                "status": r.status.value,
                "residual": None if np.isnan(r.residual) else r.residual,
                "fb_error": r.fb_error,
            }
        )
    if args.format == "csv":
        lines = ["x,y,score,tracked_x,tracked_y,status,residual,fb_error"]
        for rec in records:
            lines.append(
                ",".join(
                    "" if rec[k] is None else
                    (rec[k] if isinstance(rec[k], str) else repr(rec[k]))
                    for k in (
                        "x", "y", "score", "tracked_x", "tracked_y",
                        "status", "residual", "fb_error",
                    )
                )
            )
        _emit(args, "\n".join(lines) + "\n")
    else:
        doc = {
            "schema_version": SCHEMA_VERSION,
            "config": _config_echo(args, det, trk, scale),
            "tracks": records,
        }
        _emit(args, json.dumps(doc, sort_keys=True, indent=2) + "\n")
    return EXIT_OK


def _parse_manifest(path) -> list[tuple[str, str, np.ndarray]]:
    try:
        with open(path) as f:
            lines = f.readlines()
    except OSError as e:
        raise InputError(f"cannot read manifest {path}: {e}") from e
    pairs = []
    for ln, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 11:
            raise InputError(
                f"{path}:{ln}: expected 'pathA pathB h00 ... h22' "
                f"(11 fields), got {len(parts)}"
            )
        try:
            hm = np.array([float(v) for v in parts[2:]], np.float64).reshape(3, 3)
        except ValueError as e:
            raise InputError(f"{path}:{ln}: bad homography value: {e}") from e
        pairs.append((parts[0], parts[1], hm))
    if not pairs:
        raise InputError(f"{path}: no pairs listed")
    return pairs


def cmd_eval(args) -> int:
    weights = _load_weights_checked(args.weights)
    det, trk, scale = _effective_configs(args)
    entries = _parse_manifest(args.manifest)
    reports = []
    for path_a, path_b, hm in entries:
        image_a = _load_image_checked(path_a)
        image_b = _load_image_checked(path_b)
        if image_a.shape != image_b.shape:
            raise UsageError(
                f"pair {path_a} / {path_b}: image dimensions differ"
            )
        pair = EvalPair(image_a, image_b, hm)
        t0 = time.perf_counter()
        out_a = forward(image_a, weights)
        out_b = forward(image_b, weights)
        t1 = time.perf_counter()
        kps_a = detect(out_a.score_map, det)
        kps_b = detect(out_b.score_map, det)
        t2 = time.perf_counter()
        results = track(out_a, out_b, kps_a, trk)
        t3 = time.perf_counter()
        try:
            rep = repeatability(pair, kps_a, kps_b, threshold=args.repeat_threshold)
        except ValueError:
            rep = 0.0
        ratio = (
            correct_tracking_ratio(pair, results, tolerance=args.track_tolerance)
            if results
            else 0.0
        )
        n_correct = int(round(ratio * len(results))) if results else 0
        n_rej = sum(1 for r in results if r.status != TrackStatus.CONVERGED)
        reports.append(
            {
                "pair": [path_a, path_b],
                "repeatability": rep,
                "correct_tracking_ratio": ratio,
                "rejection_rate": (n_rej / len(results)) if results else 1.0,
                "counts": {
                    "detected_a": len(kps_a),
                    "detected_b": len(kps_b),
                    "tracked": len(results),
                    "correct": n_correct,
                    "rejected": n_rej,
                },
                "timing_ms": {
                    "forward": (t1 - t0) * 1e3,
                    "detect": (t2 - t1) * 1e3,
                    "track": (t3 - t2) * 1e3,
                },
            }
        )
    agg = {
        "repeatability": float(np.mean([r["repeatability"] for r in reports])),
        "correct_tracking_ratio": float(
            np.mean([r["correct_tracking_ratio"] for r in reports])
        ),
        "rejection_rate": float(np.mean([r["rejection_rate"] for r in reports])),
    }
    if args.format == "csv":
        lines = [
            "pair_a,pair_b,repeatability,correct_tracking_ratio,rejection_rate,"
            "detected_a,detected_b,tracked,correct,rejected"
        ]
        for r in reports:
            c = r["counts"]
            lines.append(
                f"{r['pair'][0]},{r['pair'][1]},{r['repeatability']!r},"
                f"{r['correct_tracking_ratio']!r},{r['rejection_rate']!r},"
                f"{c['detected_a']},{c['detected_b']},{c['tracked']},"
                f"{c['correct']},{c['rejected']}"
            )
        lines.append(
            f"aggregate,,{agg['repeatability']!r},"
            f"{agg['correct_tracking_ratio']!r},{agg['rejection_rate']!r},,,,,"
        )
        _emit(args, "\n".join(lines) + "\n")
    else:
        doc = {
            "schema_version": SCHEMA_VERSION,
            "config": _config_echo(args, det, trk, scale),
            "pairs": reports,
            "aggregate": agg,
        }
        _emit(args, json.dumps(doc, sort_keys=True, indent=2) + "\n")
    return EXIT_OK


def cmd_bench(args) -> int:
    weights = _load_weights_checked(args.weights) if args.weights else None
    det, trk, scale = _effective_configs(args)
    if args.image:
        image = _load_image_checked(args.image)
    else:
        image = synth_pair(args.seed, PairKind.TRANSLATION, 480, 640).image_a
    if weights is None:
        weights = random_weights(args.seed)
    if args.compare_backends:
        results = compare_backends(image, weights, det, trk, args.iterations)
        doc = {
            "schema_version": SCHEMA_VERSION,
            "config": _config_echo(args, det, trk, scale),
            "backends": results,
        }
    else:
        doc = {
            "schema_version": SCHEMA_VERSION,
            "config": _config_echo(args, det, trk, scale),
            "bench": run_pipeline_bench(image, weights, det, trk, args.iterations),
        }
    _emit(args, json.dumps(doc, sort_keys=True, indent=2) + "\n")
    return EXIT_OK


def cmd_forward(args) -> int:
    weights = _load_weights_checked(args.weights)
    image = _load_image_checked(args.image)
    det, trk, scale = _effective_configs(args)
    out, factor = _scaled_forward(image, weights, scale)
    h, w = out.shape
    doc = {
        "schema_version": SCHEMA_VERSION,
        "config": _config_echo(args, det, trk, scale),
        "height": h,
        "width": w,
        "coordinate_scale": factor,
        "score": [float(v) for v in out.score_map.reshape(-1)],
        "features": [float(v) for v in out.feature_map.reshape(-1)],
    }
    _emit(args, json.dumps(doc, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_synth(args) -> int:
    import os

    pair = synth_pair(args.seed, args.kind, args.height, args.width)
    os.makedirs(args.out_dir, exist_ok=True)
    path_a = os.path.join(args.out_dir, f"{args.kind}_{args.seed}_a.png")
    path_b = os.path.join(args.out_dir, f"{args.kind}_{args.seed}_b.png")
    imgio.save_image(pair.image_a, path_a)
    imgio.save_image(pair.image_b, path_b)
    manifest = os.path.join(args.out_dir, f"{args.kind}_{args.seed}_manifest.txt")
    hm = " ".join(repr(float(v)) for v in pair.homography.reshape(-1))
    with open(manifest, "w") as f:
        f.write(f"{path_a} {path_b} {hm}\n")
    sys.stdout.write(manifest + "\n")
    return EXIT_OK


def cmd_init_weights(args) -> int:
    save_weights(random_weights(args.seed), args.out)
    sys.stdout.write(args.out + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="featflow", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("detect", help="extract keypoints from one image")
    p.add_argument("image")
    _add_common(p)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("track", help="track keypoints from image A into image B")
    p.add_argument("image_a")
    p.add_argument("image_b")
    _add_common(p)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", help="evaluate pairs listed in a manifest")
    p.add_argument("manifest")
    _add_common(p)
    p.add_argument("--repeat-threshold", type=float, default=3.0)
    p.add_argument("--track-tolerance", type=float, default=3.0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="time the pipeline stages")
    p.add_argument("--image", help="image to benchmark (default: 640x480 synthetic)")
    _add_common(p, weights_required=False)
    p.add_argument("--iterations", type=int, default=7)
    p.add_argument(
        "--compare-backends",
        action="store_true",
        help="benchmark both the numba and numpy paths",
    )
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("forward", help="dump raw network output as JSON")
    p.add_argument("image")
    _add_common(p)
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("synth", help="write a synthetic pair and its manifest")
    p.add_argument("out_dir")
    p.add_argument(
        "--kind",
        choices=[k.value for k in PairKind],
        default=PairKind.TRANSLATION.value,
    )
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--height", type=int, default=256)
    p.add_argument("--width", type=int, default=256)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("init-weights", help="write seeded random weights")
    p.add_argument("out")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_init_weights)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "backend", None):
            backend.set_backend(args.backend)
        if getattr(args, "threads", None):
            if backend.use_numba():
                import numba

                numba.set_num_threads(max(1, args.threads))
        try:
            return args.func(args)
        finally:
            if getattr(args, "backend", None):
                backend.set_backend(None)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except InputError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except (ValueError, ops.OutOfBoundsError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except AssertionError as e:
        print(f"internal error: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
