"""Reference implementations shared by the unit and acceptance tests."""

import numpy as np
from scipy.spatial.transform import Rotation

from fogflow.geometry import CameraModel


def brute_force_rigid_flow(depth, fx, fy, cx, cy, R, t):
    """Per-pixel reference written independently of the vectorized path."""
    h, w = depth.shape
    out = np.zeros((h, w, 2))
    for v in range(h):
        for u in range(w):
            d = depth[v, u]
            X = np.array([(u - cx) / fx * d, (v - cy) / fy * d, d])
            Y = R.T @ (X - t)
            out[v, u] = (fx * Y[0] / Y[2] + cx - u, fy * Y[1] / Y[2] + cy - v)
    return out


def random_instance(rng, h=9, w=11):
    depth = rng.uniform(4.0, 40.0, (h, w))
    R = Rotation.from_euler("xyz", rng.uniform(-3, 3, 3), degrees=True).as_matrix()
    t = rng.uniform(-0.5, 0.5, 3)
    fx, fy = rng.uniform(20, 80, 2)
    cx, cy = rng.uniform(0, w), rng.uniform(0, h)
    return depth, CameraModel(fx, fy, cx, cy, R, t)
