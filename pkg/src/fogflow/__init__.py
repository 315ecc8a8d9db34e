"""Fog-robust optical flow at desk scale: procedural scenes, fog rendering,
rigid-flow geometry, correlation alignment and a small trainable estimator."""

from .tensor import Tensor, ParamStore, grad_check, warp
from .geometry import CameraModel, project_rigid_flow, fb_occlusion
from .fog import FogParams, add_fog, defog
from .scene import SceneConfig, make_scene
from .flownet import FlowNet, NetConfig, EmaConfig, ema_update

__version__ = "0.1.0"

__all__ = [
    "Tensor", "ParamStore", "grad_check", "warp",
    "CameraModel", "project_rigid_flow", "fb_occlusion",
    "FogParams", "add_fog", "defog",
    "SceneConfig", "make_scene",
    "FlowNet", "NetConfig", "EmaConfig", "ema_update",
]
