"""Dense map primitives shared by the whole toolkit.

Maps are numpy float32 arrays of shape (H, W, C), row-major. All functions
are pure; inputs are never mutated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backend

L2_EPSILON = 1e-8


class OutOfBoundsError(ValueError):
    """Sample point outside the valid image rectangle."""


@dataclass(frozen=True)
class ConvLayer:
    """One convolution layer: weights (out, in, k, k), bias (out,)."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        w = np.ascontiguousarray(self.weights, dtype=np.float32)
        b = np.ascontiguousarray(self.bias, dtype=np.float32)
        if w.ndim != 4 or w.shape[2] != w.shape[3]:
            raise ValueError(f"weights must be (out, in, k, k), got {w.shape}")
        if w.shape[2] not in (1, 3):
            raise ValueError(f"kernel size must be 1 or 3, got {w.shape[2]}")
        if b.shape != (w.shape[0],):
            raise ValueError(f"bias shape {b.shape} does not match {w.shape[0]} outputs")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.weights.shape[2]


def as_map(arr, channels: int | None = None) -> np.ndarray:
    """Validate and convert to the canonical (H, W, C) float32 layout."""
    a = np.asarray(arr)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3:
        raise ValueError(f"expected (H, W, C) map, got shape {a.shape}")
    if a.shape[0] < 1 or a.shape[1] < 1 or a.shape[2] < 1:
        raise ValueError(f"degenerate map shape {a.shape}")
    if channels is not None and a.shape[2] != channels:
        raise ValueError(f"expected {channels} channels, got {a.shape[2]}")
    return np.ascontiguousarray(a, dtype=np.float32)


def conv2d(inp: np.ndarray, layer: ConvLayer) -> np.ndarray:
    """Same-resolution convolution, stride 1, zero padding for 3x3 kernels."""
    x = as_map(inp)
    if x.shape[2] != layer.in_channels:
        raise ValueError(
            f"input has {x.shape[2]} channels, layer expects {layer.in_channels}"
        )
    if backend.use_numba():
        from . import _kernels_numba as k

        planes = np.ascontiguousarray(x.transpose(2, 0, 1))
        out = np.empty((layer.out_channels, x.shape[0], x.shape[1]), np.float32)
        if layer.kernel_size == 3:
            k.conv3x3_planes(planes, layer.weights, layer.bias, False, out)
        else:
            k.conv1x1_planes(planes, layer.weights, layer.bias, False, out)
        return np.ascontiguousarray(out.transpose(1, 2, 0))
    from . import _kernels_numpy as k

    return k.conv2d_hwc(x, layer.weights, layer.bias)


def relu(inp: np.ndarray) -> np.ndarray:
    x = as_map(inp)
    return np.maximum(x, np.float32(0.0))


def sigmoid(inp: np.ndarray) -> np.ndarray:
    """Numerically stable logistic; saturates without overflow."""
    x = as_map(inp)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def l2_normalize_channels(inp: np.ndarray, epsilon: float = L2_EPSILON) -> np.ndarray:
    """Per-pixel channel vectors scaled to unit norm; norms below epsilon
    divide by epsilon instead (zero vectors stay zero)."""
    x = as_map(inp)
    norm = np.sqrt(np.sum(x * x, axis=2, keepdims=True))
    return x / np.maximum(norm, np.float32(epsilon))


def bilinear_sample(m: np.ndarray, point) -> np.ndarray:
    """Bilinear interpolation of the (H, W, C) map at subpixel (x, y).
    Raises OutOfBoundsError outside [0, W-1] x [0, H-1]."""
    a = as_map(m)
    x, y = float(point[0]), float(point[1])
    h, w, _ = a.shape
    if not (0.0 <= x <= w - 1 and 0.0 <= y <= h - 1):
        raise OutOfBoundsError(f"point ({x}, {y}) outside {w}x{h} map")
    x0 = min(int(x), w - 2) if w > 1 else 0
    y0 = min(int(y), h - 2) if h > 1 else 0
    fx = x - x0
    fy = y - y0
    x1 = min(x0 + 1, w - 1)
    y1 = min(y0 + 1, h - 1)
    v = (
        (1 - fy) * ((1 - fx) * a[y0, x0] + fx * a[y0, x1])
        + fy * ((1 - fx) * a[y1, x0] + fx * a[y1, x1])
    )
    return v.astype(np.float32)


def downsample_half(inp: np.ndarray) -> np.ndarray:
    """Halve resolution by 2x2 block means (trailing odd row/column dropped)."""
    x = as_map(inp)
    h, w, _ = x.shape
    if h < 2 or w < 2:
        raise ValueError(f"need at least 2x2 input to downsample, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    a = x[0 : 2 * h2 : 2, 0 : 2 * w2 : 2]
    b = x[0 : 2 * h2 : 2, 1 : 2 * w2 : 2]
    c = x[1 : 2 * h2 : 2, 0 : 2 * w2 : 2]
    d = x[1 : 2 * h2 : 2, 1 : 2 * w2 : 2]
    return ((a + b) + (c + d)) * np.float32(0.25)
