"""CPU-native sparse optical flow on learned illumination-invariant feature
maps: a fixed four-convolution network yields a keypoint score map and a
3-channel feature map, keypoints come from NMS plus spacing-constrained
selection, and a multi-channel pyramidal LK solver tracks them across
frames. Training losses are provided as value-level analysis oracles.
"""

from .backend import active_backend, available_backends, set_backend
from .detector import DetectorConfig, Keypoint, detect, nms_3x3
from .network import (
    NetOutput,
    NetWeights,
    forward,
    load_weights,
    random_weights,
    save_weights,
)
from .ops import ConvLayer, OutOfBoundsError
from .tracking import (
    Pyramid,
    TrackConfig,
    TrackResult,
    TrackStatus,
    build_pyramid,
    spatial_gradients,
    track,
    track_maps,
    track_point,
)

__version__ = "0.1.0"

__all__ = [
    "ConvLayer",
    "DetectorConfig",
    "Keypoint",
    "NetOutput",
    "NetWeights",
    "OutOfBoundsError",
    "Pyramid",
    "TrackConfig",
    "TrackResult",
    "TrackStatus",
    "active_backend",
    "available_backends",
    "build_pyramid",
    "detect",
    "forward",
    "load_weights",
    "nms_3x3",
    "random_weights",
    "save_weights",
    "set_backend",
    "spatial_gradients",
    "track",
    "track_maps",
    "track_point",
    "__version__",
]
