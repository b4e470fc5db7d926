"""The fixed four-convolution feature/score network and its weights format.

Layer stack: 3->8 (3x3), 8->8 (3x3), 8->16 (1x1), 16->4 (1x1), ReLU after
each encoder layer. Of the four decoder channels, 0-2 are L2-normalized per
pixel into the feature map and channel 3 passes through a sigmoid into the
score map. Resolution is preserved throughout.
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass

import numpy as np

from . import backend, ops

MAGIC = b"LETW"
FORMAT_VERSION = 1

# slot name -> (out_channels, in_channels, kernel_size)
LAYER_SPECS: tuple[tuple[str, tuple[int, int, int]], ...] = (
    ("enc1", (8, 3, 3)),
    ("enc2", (8, 8, 3)),
    ("enc3", (16, 8, 1)),
    ("dec", (4, 16, 1)),
)


class WeightsFormatError(Exception):
    """Base class for weights-file problems."""


class BadMagicError(WeightsFormatError):
    pass


class VersionMismatchError(WeightsFormatError):
    pass


class TruncatedFileError(WeightsFormatError):
    pass


class LayerShapeError(WeightsFormatError):
    pass


@dataclass(frozen=True)
class NetWeights:
    enc1: ops.ConvLayer
    enc2: ops.ConvLayer
    enc3: ops.ConvLayer
    dec: ops.ConvLayer
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        for name, (out_c, in_c, k) in LAYER_SPECS:
            layer: ops.ConvLayer = getattr(self, name)
            got = (layer.out_channels, layer.in_channels, layer.kernel_size)
            if got != (out_c, in_c, k):
                raise LayerShapeError(
                    f"layer {name}: expected (out, in, k) = {(out_c, in_c, k)}, got {got}"
                )

    def layers(self):
        return tuple(getattr(self, name) for name, _ in LAYER_SPECS)


@dataclass(frozen=True)
class NetOutput:
    score_map: np.ndarray  # (H, W, 1), values in (0, 1)
    feature_map: np.ndarray  # (H, W, 3), unit (or zero) channel vectors

    @property
    def shape(self) -> tuple[int, int]:
        return self.score_map.shape[0], self.score_map.shape[1]


# Per-thread plane buffers reused across forward calls of the same size;
# outputs are always freshly allocated, so forward stays observably pure.
_scratch_store = threading.local()


def _plane_scratch(h: int, w: int) -> dict:
    cached = getattr(_scratch_store, "planes", None)
    if cached is not None and cached["shape"] == (h, w):
        return cached
    cached = {
        "shape": (h, w),
        "x3": np.empty((3, h, w), np.float32),
        "a8": np.empty((8, h, w), np.float32),
        "b8": np.empty((8, h, w), np.float32),
        "c16": np.empty((16, h, w), np.float32),
        "d4": np.empty((4, h, w), np.float32),
    }
    _scratch_store.planes = cached
    return cached


def forward(image: np.ndarray, weights: NetWeights) -> NetOutput:
    """Run the network on an (H, W, 3) image with values in [0, 1]."""
    img = ops.as_map(image)
    if img.shape[2] != 3:
        raise ValueError(f"expected 3-channel input, got {img.shape[2]}")
    h, w = img.shape[0], img.shape[1]

    if backend.use_numba():
        from . import _kernels_numba as k

        s = _plane_scratch(h, w)
        np.copyto(s["x3"], img.transpose(2, 0, 1))
        k.conv3x3_planes(s["x3"], weights.enc1.weights, weights.enc1.bias, True, s["a8"])
        k.conv3x3_planes(s["a8"], weights.enc2.weights, weights.enc2.bias, True, s["b8"])
        k.conv1x1_planes(s["b8"], weights.enc3.weights, weights.enc3.bias, True, s["c16"])
        k.conv1x1_planes(s["c16"], weights.dec.weights, weights.dec.bias, False, s["d4"])
        feature_map = np.empty((h, w, 3), np.float32)
        score_raw = np.empty((h, w, 1), np.float32)
        k.featscore_from_planes(
            s["d4"], np.float32(ops.L2_EPSILON), feature_map, score_raw
        )
        score_map = ops.sigmoid(score_raw)
    else:
        x = img
        x = ops.relu(ops.conv2d(x, weights.enc1))
        x = ops.relu(ops.conv2d(x, weights.enc2))
        x = ops.relu(ops.conv2d(x, weights.enc3))
        dec_out = ops.conv2d(x, weights.dec)
        feature_map = ops.l2_normalize_channels(dec_out[:, :, 0:3])
        score_map = ops.sigmoid(dec_out[:, :, 3:4])
    return NetOutput(score_map=score_map, feature_map=feature_map)


def random_weights(seed: int) -> NetWeights:
    """Seeded weights drawn U(-1/sqrt(fan_in), 1/sqrt(fan_in)) per layer,
    small enough that random-weight forward passes stay numerically benign."""
    rng = np.random.default_rng(seed)
    layers = {}
    for name, (out_c, in_c, k) in LAYER_SPECS:
        bound = 1.0 / np.sqrt(in_c * k * k)
        w = rng.uniform(-bound, bound, size=(out_c, in_c, k, k)).astype(np.float32)
        b = rng.uniform(-bound, bound, size=out_c).astype(np.float32)
        layers[name] = ops.ConvLayer(w, b)
    return NetWeights(**layers)


def save_weights(weights: NetWeights, path) -> None:
    """Little-endian binary: magic, u32 version, then per layer u32 out/in/k
    followed by float32 weights (out-major) and biases."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", weights.format_version))
        for layer in weights.layers():
            f.write(
                struct.pack(
                    "<III", layer.out_channels, layer.in_channels, layer.kernel_size
                )
            )
            f.write(np.ascontiguousarray(layer.weights, "<f4").tobytes())
            f.write(np.ascontiguousarray(layer.bias, "<f4").tobytes())


def load_weights(path) -> NetWeights:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {data[:4]!r}, expected {MAGIC!r}")
    if len(data) < 8:
        raise TruncatedFileError(f"{path}: truncated before version field")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(
            f"{path}: format version {version}, expected {FORMAT_VERSION}"
        )
    offset = 8
    layers = {}
    for name, (out_c, in_c, k) in LAYER_SPECS:
        if offset + 12 > len(data):
            raise TruncatedFileError(f"{path}: truncated in header of layer {name}")
        got_out, got_in, got_k = struct.unpack_from("<III", data, offset)
        offset += 12
        if (got_out, got_in, got_k) != (out_c, in_c, k):
            raise LayerShapeError(
                f"{path}: layer {name} declares (out, in, k) = "
                f"{(got_out, got_in, got_k)}, expected {(out_c, in_c, k)}"
            )
        n_w = out_c * in_c * k * k
        n_b = out_c
        need = 4 * (n_w + n_b)
        if offset + need > len(data):
            raise TruncatedFileError(f"{path}: truncated in parameters of layer {name}")
        w = np.frombuffer(data, "<f4", count=n_w, offset=offset).reshape(
            out_c, in_c, k, k
        )
        offset += 4 * n_w
        b = np.frombuffer(data, "<f4", count=n_b, offset=offset)
        offset += 4 * n_b
        layers[name] = ops.ConvLayer(w.copy(), b.copy())
    if offset != len(data):
        raise WeightsFormatError(
            f"{path}: {len(data) - offset} trailing bytes after last layer"
        )
    return NetWeights(**layers, format_version=version)
