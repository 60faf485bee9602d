"""Pillar-based pedestrian detection with point-wise attention, built on a small numpy autodiff core."""

from .config import PipelineConfig, preset
from .geometry import Box3D, Detection
from .model import PiFeNet
from .pillars import PillarConfig, PointCloud, pillarize

__all__ = ["Box3D", "Detection", "PiFeNet", "PillarConfig", "PipelineConfig", "PointCloud", "pillarize", "preset"]
__version__ = "0.1.0"
