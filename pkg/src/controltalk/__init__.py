"""Audio-driven editing of implicit 3D facial keypoints.

The package turns a waveform into per-frame expression deltas for a
keypoint-based face model, renders the result with a differentiable
Gaussian-splat rasterizer, and ships a fully synthetic talking-face
corpus whose mouth motion follows a known audio law, so every stage is
checkable against a closed-form oracle.
"""

from .errors import (
    ConfigError,
    ControlTalkError,
    DataError,
    DimensionError,
    NumericError,
    ValidationError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ControlTalkError",
    "DataError",
    "DimensionError",
    "NumericError",
    "ValidationError",
    "__version__",
]
