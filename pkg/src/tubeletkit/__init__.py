"""Tubelet proposals from static anchors, temporal classification and their evaluation."""

from __future__ import annotations

from ._accel import BACKEND
from .geometry import Box, MovementDelta, decode_movement, encode_movement, iou
from .synthworld import FeatureOracleParams, WorldConfig, generate_video

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "Box",
    "FeatureOracleParams",
    "MovementDelta",
    "WorldConfig",
    "decode_movement",
    "encode_movement",
    "generate_video",
    "iou",
    "__version__",
]
