"""Camera model, depth-to-flow projection, and occlusion / non-rigid masks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .tensor import pixel_grid, sample

Z_MIN = 1e-6
ALPHA1 = 0.01
ALPHA2 = 0.5
TAU = 1.0


class DegeneratePoseError(ValueError):
    """Raised when no pixel projects in front of the second camera."""


@dataclass
class CameraModel:
    """Pinhole intrinsics plus the camera's ego-motion from frame t to t+1.

    ``R`` and ``t`` are the orientation and position of camera t+1 expressed
    in camera-t coordinates, so a static point ``X`` moves to
    ``R.T @ (X - t)``.  ``baseline`` is the stereo baseline in meters; the
    right camera sits at ``+baseline`` along x.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    baseline: float = 0.5

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not np.allclose(self.R @ self.R.T, np.eye(3), atol=1e-9, rtol=0):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(self.R) - 1.0) > 1e-9:
            raise ValueError("rotation must have determinant 1")

    @classmethod
    def from_pose(cls, fx, fy, cx, cy, rotation_deg=(0.0, 0.0, 0.0),
                  translation_m=(0.0, 0.0, 0.0), baseline=0.5) -> "CameraModel":
        R = Rotation.from_euler("xyz", rotation_deg, degrees=True).as_matrix()
        return cls(fx, fy, cx, cy, R, np.asarray(translation_m, dtype=np.float64), baseline)

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def K_inv(self) -> np.ndarray:
        return np.array([
            [1.0 / self.fx, 0.0, -self.cx / self.fx],
            [0.0, 1.0 / self.fy, -self.cy / self.fy],
            [0.0, 0.0, 1.0],
        ])

    def to_next(self, X: np.ndarray) -> np.ndarray:
        """Map camera-t points (rows of ``X``) into camera t+1 coordinates."""
        return (X - self.t) @ self.R

    def with_pose(self, R, t) -> "CameraModel":
        return CameraModel(self.fx, self.fy, self.cx, self.cy, R, t, self.baseline)

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "R": self.R.tolist(), "t": self.t.tolist(), "baseline": self.baseline,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], d["R"], d["t"], d.get("baseline", 0.5))


def homogeneous_pixels(h: int, w: int) -> np.ndarray:
    xs, ys = pixel_grid(h, w)
    return np.stack([xs, ys, np.ones_like(xs)], axis=-1)


def project_rigid_flow(depth: np.ndarray, cam: CameraModel, z_min: float = Z_MIN):
    """Flow induced by camera motion over the static depth map.

    Back-projects each pixel with its depth, applies the relative pose and
    reprojects.  Returns ``(flow, valid)``; pixels landing at ``z <= z_min``
    are invalid and carry zero flow.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(~np.isfinite(depth)) or np.any(depth <= 0):
        raise ValueError("depth must be positive and finite")
    h, w = depth.shape
    pix = homogeneous_pixels(h, w)
    X = (pix @ cam.K_inv.T) * depth[..., None]
    Xn = cam.to_next(X)
    z = Xn[..., 2]
    valid = z > z_min
    if not valid.any():
        raise DegeneratePoseError("every pixel projects behind the camera")
    zs = np.where(valid, z, 1.0)
    u = cam.fx * Xn[..., 0] / zs + cam.cx - pix[..., 0]
    v = cam.fy * Xn[..., 1] / zs + cam.cy - pix[..., 1]
    flow = np.stack([u, v], axis=-1)
    flow[~valid] = 0.0
    return flow, valid


def _fb_mask(flow_a: np.ndarray, flow_b: np.ndarray, alpha1: float, alpha2: float) -> np.ndarray:
    h, w = flow_a.shape[:2]
    xs, ys = pixel_grid(h, w)
    b_at, _ = sample(flow_b, xs + flow_a[..., 0], ys + flow_a[..., 1])
    b_at = b_at.data
    diff = ((flow_a + b_at) ** 2).sum(-1)
    mag = (flow_a ** 2).sum(-1) + (b_at ** 2).sum(-1)
    return (diff > alpha1 * mag + alpha2).astype(np.float64)


def fb_occlusion(flow_fwd: np.ndarray, flow_bwd: np.ndarray,
                 alpha1: float = ALPHA1, alpha2: float = ALPHA2):
    """Forward-backward consistency occlusion masks ``(O_f, O_b)``.

    ``O_f(p) = 1`` where ``|F_f(p) + F_b(p + F_f(p))|^2`` exceeds
    ``alpha1 * (|F_f|^2 + |F_b|^2) + alpha2``; ``O_b`` swaps the roles.
    """
    flow_fwd = np.asarray(flow_fwd, dtype=np.float64)
    flow_bwd = np.asarray(flow_bwd, dtype=np.float64)
    if flow_fwd.shape != flow_bwd.shape:
        raise ValueError("forward and backward flows differ in extent")
    return (_fb_mask(flow_fwd, flow_bwd, alpha1, alpha2),
            _fb_mask(flow_bwd, flow_fwd, alpha1, alpha2))


def nonrigid_mask(flow: np.ndarray, rigid_flow: np.ndarray, tau: float = TAU) -> np.ndarray:
    """``V(p) = 1`` where the estimated flow departs from the rigid flow by > tau px."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    flow = np.asarray(flow, dtype=np.float64)
    rigid_flow = np.asarray(rigid_flow, dtype=np.float64)
    if flow.shape != rigid_flow.shape:
        raise ValueError("flow extents differ")
    return (np.linalg.norm(flow - rigid_flow, axis=-1) > tau).astype(np.float64)


def nonrigid_mask_from_occlusion(flow_fwd: np.ndarray, flow_bwd: np.ndarray,
                                 alpha1: float = ALPHA1, alpha2: float = ALPHA2) -> np.ndarray:
    """Alternative ``V``: the forward occlusion mask of the clean flow pair."""
    return fb_occlusion(flow_fwd, flow_bwd, alpha1, alpha2)[0]
