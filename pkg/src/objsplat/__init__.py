"""Object-centric Gaussian splat scenes: training, tracking, querying, servoing."""

from .geometry import CameraModel, PoseSE3, Twist, se3_exp, se3_log, transform_point
from .scene import (
    GaussianPrimitive,
    GaussianScene,
    ObjectCluster,
    SceneConfig,
    SceneSnapshot,
    load_scene,
    save_scene,
)
from .raster import ChannelMask, OutputGrads, RenderGrads, RenderOutput, render, render_backward

__version__ = "0.1.0"

__all__ = [
    "CameraModel",
    "PoseSE3",
    "Twist",
    "se3_exp",
    "se3_log",
    "transform_point",
    "GaussianPrimitive",
    "GaussianScene",
    "ObjectCluster",
    "SceneConfig",
    "SceneSnapshot",
    "load_scene",
    "save_scene",
    "ChannelMask",
    "OutputGrads",
    "RenderGrads",
    "RenderOutput",
    "render",
    "render_backward",
    "__version__",
]
