"""Procedural stereo sequences with exact depth, pose and flow.

A scene is a background plane (fronto-parallel, or tilted so that depth
runs from ``depth_far`` on the top row to ``depth_near`` on the bottom row)
plus textured rectangles floating in front of it, each with its own
image-space motion.  Frames are ray cast, so every render, depth map and
flow field comes from one analytic model.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Z_MIN, CameraModel, homogeneous_pixels


class SceneError(ValueError):
    """Invalid scene configuration."""


@dataclass
class ObjectSpec:
    """Rectangle covering pixel columns ``x..x+w-1`` and rows ``y..y+h-1`` at frame t."""

    x: int
    y: int
    w: int
    h: int
    depth: float
    motion: tuple = (0.0, 0.0)

    @property
    def moving(self) -> bool:
        return self.motion[0] != 0 or self.motion[1] != 0


@dataclass
class SceneConfig:
    width: int = 64
    height: int = 64
    fx: float = 64.0
    fy: float = 64.0
    cx: float | None = None
    cy: float | None = None
    baseline_m: float = 0.5
    rotation_deg: tuple = (0.0, 0.0, 0.0)
    translation_m: tuple = (0.0, 0.0, 0.0)
    depth_near: float = 10.0
    depth_far: float = 10.0
    objects: list = field(default_factory=list)
    octaves: int = 4
    cell_px: float = 12.0
    contrast: float = 1.6
    persistence: float = 0.5
    chroma: float = 0.0

    def __post_init__(self):
        self.objects = [o if isinstance(o, ObjectSpec) else ObjectSpec(**o) for o in self.objects]
        if self.cx is None:
            self.cx = (self.width - 1) / 2.0
        if self.cy is None:
            self.cy = (self.height - 1) / 2.0

    def camera(self) -> CameraModel:
        return CameraModel.from_pose(
            self.fx, self.fy, self.cx, self.cy,
            self.rotation_deg, self.translation_m, self.baseline_m,
        )

    def to_dict(self) -> dict:
        return {
            "width": self.width, "height": self.height,
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "baseline_m": self.baseline_m,
            "pose": {"rotation_deg": list(self.rotation_deg),
                     "translation_m": list(self.translation_m)},
            "background": {"depth_near": self.depth_near, "depth_far": self.depth_far},
            "texture": {"octaves": self.octaves, "cell_px": self.cell_px,
                        "contrast": self.contrast, "persistence": self.persistence,
                        "chroma": self.chroma},
            "objects": [dict(asdict(o), motion=list(o.motion)) for o in self.objects],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        pose = d.get("pose", {})
        bg = d.get("background", {})
        tex = d.get("texture", {})
        near = bg.get("depth_near", 10.0)
        return cls(
            width=int(d["width"]), height=int(d["height"]),
            fx=float(d["fx"]), fy=float(d["fy"]),
            cx=d.get("cx"), cy=d.get("cy"),
            baseline_m=float(d.get("baseline_m", 0.5)),
            rotation_deg=tuple(pose.get("rotation_deg", (0.0, 0.0, 0.0))),
            translation_m=tuple(pose.get("translation_m", (0.0, 0.0, 0.0))),
            depth_near=near, depth_far=bg.get("depth_far", near),
            objects=[dict(o, motion=tuple(o.get("motion", (0.0, 0.0)))) for o in d.get("objects", [])],
            octaves=int(tex.get("octaves", 4)),
            cell_px=float(tex.get("cell_px", 12.0)),
            contrast=float(tex.get("contrast", 1.6)),
            persistence=float(tex.get("persistence", 0.5)),
            chroma=float(tex.get("chroma", 0.0)),
        )

    @classmethod
    def from_json(cls, path) -> "SceneConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class SceneSample:
    left_t: np.ndarray
    left_t1: np.ndarray
    right_t: np.ndarray
    right_t1: np.ndarray
    depth_t: np.ndarray
    depth_t1: np.ndarray
    camera: CameraModel
    flow: np.ndarray
    flow_bwd: np.ndarray
    nonrigid: np.ndarray
    flow_valid: np.ndarray

    @property
    def disparity_t(self) -> np.ndarray:
        return self.camera.fx * self.camera.baseline / self.depth_t

    @property
    def disparity_t1(self) -> np.ndarray:
        return self.camera.fx * self.camera.baseline / self.depth_t1


# ---------------------------------------------------------------------------
# Texture
# ---------------------------------------------------------------------------

def _hash2(i: np.ndarray, j: np.ndarray, seed: int) -> np.ndarray:
    x = (i.astype(np.int64).astype(np.uint32) * np.uint32(0x8DA6B343)) ^ (
        j.astype(np.int64).astype(np.uint32) * np.uint32(0xD8163841)
    ) ^ np.uint32((seed * 0x9E3779B1) & 0xFFFFFFFF)
    x ^= x >> np.uint32(16)
    x *= np.uint32(0x7FEB352D)
    x ^= x >> np.uint32(15)
    x *= np.uint32(0x846CA68B)
    x ^= x >> np.uint32(16)
    return x.astype(np.float64) / 4294967296.0


def value_noise(u: np.ndarray, v: np.ndarray, seed: int) -> np.ndarray:
    """Smoothstep-interpolated lattice noise in [0, 1)."""
    i0 = np.floor(u)
    j0 = np.floor(v)
    fu = u - i0
    fv = v - j0
    su = fu * fu * (3 - 2 * fu)
    sv = fv * fv * (3 - 2 * fv)
    a = _hash2(i0, j0, seed)
    b = _hash2(i0 + 1, j0, seed)
    c = _hash2(i0, j0 + 1, seed)
    d = _hash2(i0 + 1, j0 + 1, seed)
    return (a * (1 - su) + b * su) * (1 - sv) + (c * (1 - su) + d * su) * sv


def fbm(u: np.ndarray, v: np.ndarray, seed: int, octaves: int, cell: float,
        persistence: float = 0.5) -> np.ndarray:
    total = np.zeros_like(u)
    norm = 0.0
    for o in range(octaves):
        scale = (2.0 ** o) / cell
        amp = persistence ** o
        total += amp * value_noise(u * scale, v * scale, seed * 131 + o)
        norm += amp
    return total / norm


# ---------------------------------------------------------------------------
# Ray casting
# ---------------------------------------------------------------------------

@dataclass
class _Surface:
    normal: np.ndarray
    offset: float
    motion: np.ndarray
    bounds: tuple | None
    tex_seed: int
    color: np.ndarray


def _background_plane(cfg: SceneConfig) -> tuple[np.ndarray, float]:
    inv_far, inv_near = 1.0 / cfg.depth_far, 1.0 / cfg.depth_near
    slope = (inv_near - inv_far) / (cfg.height - 1)
    c = 1.0 / (inv_far + slope * cfg.cy)
    n_y = slope * cfg.fy * c
    return np.array([0.0, n_y, 1.0]), c


def _surfaces(cfg: SceneConfig, rng: np.random.Generator) -> list[_Surface]:
    if cfg.depth_near <= 0 or cfg.depth_far <= 0:
        raise SceneError("depth plane behind camera")
    n, c = _background_plane(cfg)
    out = [_Surface(n, c, np.zeros(3), None, int(rng.integers(1 << 30)), rng.uniform(0.3, 0.7, 3))]
    for obj in cfg.objects:
        if obj.depth <= 0:
            raise SceneError("object depth plane behind camera")
        if obj.w <= 0 or obj.h <= 0 or obj.x < 0 or obj.y < 0 \
                or obj.x + obj.w > cfg.width or obj.y + obj.h > cfg.height:
            raise SceneError(f"object outside frame: {obj}")
        z = obj.depth
        x0 = (obj.x - 0.5 - cfg.cx) * z / cfg.fx
        x1 = (obj.x + obj.w - 0.5 - cfg.cx) * z / cfg.fx
        y0 = (obj.y - 0.5 - cfg.cy) * z / cfg.fy
        y1 = (obj.y + obj.h - 0.5 - cfg.cy) * z / cfg.fy
        motion = np.array([obj.motion[0] * z / cfg.fx, obj.motion[1] * z / cfg.fy, 0.0])
        out.append(_Surface(np.array([0.0, 0.0, 1.0]), z, motion, (x0, x1, y0, y1),
                            int(rng.integers(1 << 30)), rng.uniform(0.3, 0.7, 3)))
    return out


def _cast(cfg: SceneConfig, surfaces, R: np.ndarray, t: np.ndarray, moved: bool):
    """Ray cast one camera (world->camera ``X_c = R X + t``).

    Returns per-pixel depth, surface id and the hit point expressed in the
    surface's own frame-t position (object motion removed).
    """
    K_inv = CameraModel(cfg.fx, cfg.fy, cfg.cx, cfg.cy).K_inv
    rays = homogeneous_pixels(cfg.height, cfg.width) @ K_inv.T
    centre = -R.T @ t
    dirs = rays @ R
    best = np.full((cfg.height, cfg.width), np.inf)
    sid = np.full((cfg.height, cfg.width), -1, dtype=np.int64)
    hit = np.zeros((cfg.height, cfg.width, 3))
    for k, s in enumerate(surfaces):
        shift = s.motion if moved else np.zeros(3)
        denom = dirs @ s.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = (s.offset + s.normal @ shift - s.normal @ centre) / denom
        lam = np.where(np.abs(denom) > 1e-12, lam, np.inf)
        pts = centre + lam[..., None] * dirs - shift
        ok = lam > Z_MIN
        if s.bounds is not None:
            x0, x1, y0, y1 = s.bounds
            ok &= (pts[..., 0] >= x0) & (pts[..., 0] < x1) & (pts[..., 1] >= y0) & (pts[..., 1] < y1)
        closer = ok & (lam < best)
        best = np.where(closer, lam, best)
        sid = np.where(closer, k, sid)
        hit = np.where(closer[..., None], pts, hit)
    if np.any(sid < 0) or np.any(~np.isfinite(best)):
        raise SceneError("depth plane behind camera: some rays hit no surface")
    return best, sid, hit


def _shade(cfg: SceneConfig, surfaces, sid: np.ndarray, hit: np.ndarray) -> np.ndarray:
    u = cfg.fx * hit[..., 0] / hit[..., 2] + cfg.cx
    v = cfg.fy * hit[..., 1] / hit[..., 2] + cfg.cy
    img = np.zeros(sid.shape + (3,))
    for k, s in enumerate(surfaces):
        m = sid == k
        if not m.any():
            continue
        n = fbm(u[m], v[m], s.tex_seed, cfg.octaves, cfg.cell_px, cfg.persistence)[:, None]
        if cfg.chroma > 0:
            # independent per-channel noise mixed into the shared luminance pattern
            nc = np.stack([fbm(u[m], v[m], s.tex_seed + 7919 * (c + 1), cfg.octaves,
                               cfg.cell_px, cfg.persistence) for c in range(3)], axis=-1)
            n = (1 - cfg.chroma) * n + cfg.chroma * nc
        img[m] = s.color + cfg.contrast * (n - 0.5)
    return np.clip(img, 0.0, 1.0)


def _project(cam: CameraModel, X: np.ndarray):
    z = X[..., 2]
    valid = z > Z_MIN
    zs = np.where(valid, z, 1.0)
    return cam.fx * X[..., 0] / zs + cam.cx, cam.fy * X[..., 1] / zs + cam.cy, valid


def make_scene(cfg: SceneConfig, seed: int) -> SceneSample:
    """Render a stereo pair at t and t+1 with ground-truth depth and flow."""
    if cfg.width < 16 or cfg.height < 16:
        raise SceneError("scene extent must be at least 16x16")
    cam = cfg.camera()
    rng = np.random.default_rng(seed)
    surfaces = _surfaces(cfg, rng)
    eye, zero = np.eye(3), np.zeros(3)
    base = np.array([cfg.baseline_m, 0.0, 0.0])

    depth_t, sid_t, hit_t = _cast(cfg, surfaces, eye, zero, moved=False)
    R_next, t_next = cam.R.T, -cam.R.T @ cam.t
    depth_t1, sid_t1, hit_t1 = _cast(cfg, surfaces, R_next, t_next, moved=True)
    _, sid_rt, hit_rt = _cast(cfg, surfaces, eye, -base, moved=False)
    _, sid_rt1, hit_rt1 = _cast(cfg, surfaces, R_next, t_next - base, moved=True)

    motions = np.stack([s.motion for s in surfaces])
    pix = homogeneous_pixels(cfg.height, cfg.width)

    # forward: frame-t point, moved with its surface, seen from camera t+1
    X1 = cam.to_next(hit_t + motions[sid_t])
    u1, v1, ok_f = _project(cam, X1)
    flow = np.stack([u1 - pix[..., 0], v1 - pix[..., 1]], axis=-1)
    # backward: frame-t+1 pixel back to its frame-t position
    u0, v0, ok_b = _project(cam, hit_t1)
    flow_bwd = np.stack([u0 - pix[..., 0], v0 - pix[..., 1]], axis=-1)
    flow[~ok_f] = 0.0
    flow_bwd[~ok_b] = 0.0

    moving = np.array([np.any(s.motion != 0) for s in surfaces])
    return SceneSample(
        left_t=_shade(cfg, surfaces, sid_t, hit_t),
        left_t1=_shade(cfg, surfaces, sid_t1, hit_t1),
        right_t=_shade(cfg, surfaces, sid_rt, hit_rt),
        right_t1=_shade(cfg, surfaces, sid_rt1, hit_rt1),
        depth_t=depth_t,
        depth_t1=depth_t1,
        camera=cam,
        flow=flow,
        flow_bwd=flow_bwd,
        nonrigid=moving[sid_t].astype(np.float64),
        flow_valid=ok_f.astype(np.float64),
    )


def random_scene_config(
    rng: np.random.Generator,
    width: int = 64,
    height: int = 64,
    max_objects: int = 2,
    depth_range: tuple = (5.0, 50.0),
    max_translation: tuple = (0.6, 0.1, 1.5),
    max_rotation_deg: tuple = (1.0, 3.0, 0.0),
    max_object_motion: float = 6.0,
    cell_px: float = 10.0,
    persistence: float = 0.6,
    chroma: float = 0.7,
) -> SceneConfig:
    """Draw a random driving-like scene: depth ramp, ego-motion, movers.

    The defaults give flows of a few pixels at 64x64 over a fine, colored
    texture, which the 1/4-resolution matcher can resolve.
    """
    near = rng.uniform(depth_range[0], 2 * depth_range[0])
    far = rng.uniform(0.4 * depth_range[1], depth_range[1])
    objects = []
    for _ in range(int(rng.integers(0, max_objects + 1))):
        ow, oh = int(rng.integers(10, 21)), int(rng.integers(10, 21))
        objects.append(ObjectSpec(
            x=int(rng.integers(0, width - ow + 1)),
            y=int(rng.integers(height // 4, height - oh + 1)),
            w=ow, h=oh,
            depth=float(rng.uniform(0.6 * depth_range[0], near)),
            motion=tuple(float(m) for m in rng.uniform(-max_object_motion, max_object_motion, 2)),
        ))
    return SceneConfig(
        width=width, height=height, fx=float(width), fy=float(width),
        rotation_deg=tuple(float(r) for r in rng.uniform(-1, 1, 3) * np.asarray(max_rotation_deg)),
        translation_m=tuple(float(x) for x in rng.uniform(-1, 1, 3) * np.asarray(max_translation)
                            * np.array([1.0, 1.0, 0.0]) + np.array([0.0, 0.0, rng.uniform(0, max_translation[2])])),
        depth_near=near, depth_far=far,
        objects=objects,
        cell_px=cell_px, persistence=persistence, chroma=chroma,
    )
