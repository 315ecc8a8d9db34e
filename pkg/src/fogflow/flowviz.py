"""Flow visualization with the Middlebury color wheel."""

from __future__ import annotations

import numpy as np

from .io import write_ppm

# hue segment lengths: red-yellow, yellow-green, green-cyan, cyan-blue, blue-magenta, magenta-red
SEGMENTS = (15, 6, 4, 11, 13, 6)


def color_wheel() -> np.ndarray:
    """``(55, 3)`` RGB wheel in [0, 1]."""
    ry, yg, gc, cb, bm, mr = SEGMENTS
    wheel = np.zeros((sum(SEGMENTS), 3))
    col = 0
    # each segment holds one channel at full and ramps another
    for n, full, ramp, up in ((ry, 0, 1, True), (yg, 1, 0, False), (gc, 1, 2, True),
                              (cb, 2, 1, False), (bm, 2, 0, True), (mr, 0, 2, False)):
        r = np.arange(n) / n
        wheel[col:col + n, full] = 1.0
        wheel[col:col + n, ramp] = r if up else 1.0 - r
        col += n
    return wheel


def flow_to_rgb(flow: np.ndarray, max_rad: float | None = None) -> tuple[np.ndarray, float]:
    """Map flow to colors; magnitude is normalized by ``max_rad`` (default: per-image max)."""
    flow = np.asarray(flow, dtype=np.float64)
    u, v = flow[..., 0], flow[..., 1]
    rad = np.hypot(u, v)
    if max_rad is None:
        max_rad = float(rad.max())
    scale = max_rad if max_rad > 0 else 1.0
    u, v, rad = u / scale, v / scale, rad / scale
    wheel = color_wheel()
    n = wheel.shape[0]
    angle = np.arctan2(-v, -u) / np.pi
    fk = (angle + 1) / 2 * (n - 1)
    k0 = np.floor(fk).astype(int)
    k1 = (k0 + 1) % n
    f = (fk - k0)[..., None]
    col = (1 - f) * wheel[k0] + f * wheel[k1]
    r = np.minimum(rad, 1.0)[..., None]
    col = 1 - r * (1 - col)
    col[rad > 1] *= 0.75
    return col, max_rad


def write_flow_ppm(path, flow: np.ndarray, max_rad: float | None = None) -> float:
    """Write the color-coded flow; the normalizer is stored in a header comment."""
    rgb, max_rad = flow_to_rgb(flow, max_rad)
    write_ppm(path, rgb, comment=f"fogflow flow max_rad={max_rad:.9g}")
    return max_rad
