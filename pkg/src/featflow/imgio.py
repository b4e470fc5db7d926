"""Image ingestion for the CLI: 8-bit PNG/PGM/PPM in, float maps out.

Grayscale inputs are replicated to 3 channels; pixel values are scaled to
[0, 1] as the network expects.
"""

from __future__ import annotations

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import ops


class ImageReadError(ValueError):
    pass


def load_image(path) -> np.ndarray:
    """Read an 8-bit grayscale or RGB image as an (H, W, 3) float32 map in
    [0, 1]."""
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB")
            arr = np.asarray(im)
    except (UnidentifiedImageError, OSError, SyntaxError) as e:
        raise ImageReadError(f"cannot decode image {path}: {e}") from e
    if arr.dtype != np.uint8:
        raise ImageReadError(f"{path}: expected 8-bit pixels, got {arr.dtype}")
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    return (arr.astype(np.float32) / np.float32(255.0)).copy()


def save_image(image: np.ndarray, path) -> None:
    """Write a float map in [0, 1] as an 8-bit image (format from suffix)."""
    img = ops.as_map(image)
    u8 = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    if u8.shape[2] == 1:
        Image.fromarray(u8[:, :, 0], "L").save(path)
    elif u8.shape[2] == 3:
        Image.fromarray(u8, "RGB").save(path)
    else:
        raise ValueError(f"cannot save {u8.shape[2]}-channel image")


def resize_bilinear(image: np.ndarray, new_height: int, new_width: int) -> np.ndarray:
    """Bilinear resize via corner-aligned sampling of the source grid."""
    img = ops.as_map(image)
    h, w, _ = img.shape
    if new_height < 1 or new_width < 1:
        raise ValueError("target size must be at least 1x1")
    sy = (h - 1) / (new_height - 1) if new_height > 1 else 0.0
    sx = (w - 1) / (new_width - 1) if new_width > 1 else 0.0
    ys = np.arange(new_height, dtype=np.float64) * sy
    xs = np.arange(new_width, dtype=np.float64) * sx
    y0 = np.clip(ys.astype(np.int64), 0, max(h - 2, 0))
    x0 = np.clip(xs.astype(np.int64), 0, max(w - 2, 0))
    fy = (ys - y0).astype(np.float32)[:, None, None]
    fx = (xs - x0).astype(np.float32)[None, :, None]
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    a = img[y0[:, None], x0[None, :]]
    b = img[y0[:, None], x1[None, :]]
    c = img[y1[:, None], x0[None, :]]
    d = img[y1[:, None], x1[None, :]]
    return (1 - fy) * ((1 - fx) * a + fx * b) + fy * ((1 - fx) * c + fx * d)
