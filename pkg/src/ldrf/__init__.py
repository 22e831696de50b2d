"""Lidar-fused neural radiance fields for street-scale scenes.

The package trains a hybrid radiance field whose density/color decoder fuses a
multiresolution hash encoding with features aggregated from an encoded Lidar
point cloud, supervises depth through an occlusion-aware curriculum with an
exact Gaussian line-of-sight loss, and augments training with views rendered
from the colorized Lidar points themselves.
"""

__version__ = "0.1.0"

from .geometry import PinholeCamera, SceneBounds, SE3Pose, LidarSweep
from .trainer import TrainingConfig, Trainer

__all__ = [
    "PinholeCamera",
    "SceneBounds",
    "SE3Pose",
    "LidarSweep",
    "TrainingConfig",
    "Trainer",
    "__version__",
]
