"""Atmospheric scattering fog: synthesis from depth and its inverse."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

T_MIN = 1e-3
BETA_LIGHT = 0.03
BETA_DENSE = 0.12
AIRLIGHT = 0.8


@dataclass
class FogParams:
    beta: float = BETA_DENSE
    A: tuple = field(default=(AIRLIGHT, AIRLIGHT, AIRLIGHT))

    def __post_init__(self):
        if not np.isfinite(self.beta) or self.beta < 0:
            raise ValueError("beta must be finite and non-negative")
        A = np.atleast_1d(np.asarray(self.A, dtype=np.float64))
        if np.any(A <= 0) or np.any(A > 1):
            raise ValueError("atmospheric light must lie in (0, 1]")
        self.A = tuple(float(a) for a in A)

    @property
    def airlight(self) -> np.ndarray:
        return np.asarray(self.A, dtype=np.float64)

    def to_dict(self) -> dict:
        return {"beta": self.beta, "A": list(self.A)}

    @classmethod
    def from_dict(cls, d: dict) -> "FogParams":
        A = d.get("A", AIRLIGHT)
        if np.isscalar(A):
            A = (A, A, A)
        return cls(float(d["beta"]), tuple(A))


def _check_depth(depth) -> np.ndarray:
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(~np.isfinite(depth)) or np.any(depth <= 0):
        raise ValueError("depth must be positive and finite")
    return depth


def transmittance(depth, beta: float) -> np.ndarray:
    """``t = exp(-beta * D)`` as an ``(H, W, 1)`` grid."""
    depth = _check_depth(depth)
    return np.exp(-beta * depth)[..., None]


def _airlight_for(image: np.ndarray, params: FogParams) -> np.ndarray:
    A = params.airlight
    c = image.shape[-1]
    if A.size == c:
        return A
    if np.all(A == A[0]):
        return np.full(c, A[0])
    raise ValueError("airlight channel count does not match the image")


def add_fog(clean, depth, params: FogParams) -> np.ndarray:
    """Render fog: ``J = I * t + A * (1 - t)``."""
    clean = np.asarray(clean, dtype=np.float64)
    depth = _check_depth(depth)
    if clean.shape[:2] != depth.shape:
        raise ValueError("image and depth extents differ")
    t = transmittance(depth, params.beta)
    return clean * t + _airlight_for(clean, params) * (1.0 - t)


def defog(foggy, depth, params: FogParams, t_min: float = T_MIN) -> np.ndarray:
    """Invert the scattering model: ``I = (J - A * (1 - t)) / t`` with ``t >= t_min``."""
    foggy = np.asarray(foggy, dtype=np.float64)
    depth = _check_depth(depth)
    if foggy.shape[:2] != depth.shape:
        raise ValueError("image and depth extents differ")
    t = np.maximum(transmittance(depth, params.beta), t_min)
    return (foggy - _airlight_for(foggy, params) * (1.0 - t)) / t
