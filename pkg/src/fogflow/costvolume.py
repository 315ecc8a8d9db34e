"""Correlation volumes between feature maps.

A volume holds one score per pixel and per integer displacement in a
``(2r+1) x (2r+1)`` window, laid out as ``(h, w, D)`` with the displacement
index ``(dy + r) * (2r + 1) + (dx + r)``.  Displaced reads clamp to the
feature-map border.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .tensor import Tensor, as_tensor, warp

RADIUS = 3
SCA_WINDOW = 7
SCA_K = 4
FUSE_ALPHA = 0.25


@dataclass
class CostVolume:
    values: Tensor
    radius: int
    vmin: float | None = None
    vmax: float | None = None

    @property
    def normalized(self) -> bool:
        return self.vmin is not None

    @property
    def shape(self) -> tuple:
        return self.values.shape

    def numpy(self) -> np.ndarray:
        return self.values.data


def displacements(radius: int) -> np.ndarray:
    """``(D, 2)`` table of ``(dx, dy)`` in volume order."""
    dy, dx = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    return np.stack([dx.reshape(-1), dy.reshape(-1)], axis=-1).astype(np.float64)


@lru_cache(maxsize=64)
def _neighbour_index(h: int, w: int, c: int, radius: int) -> np.ndarray:
    """Flat gather index ``(h, w, D, c)`` of clamped displaced neighbours."""
    i, j = np.mgrid[0:h, 0:w]
    d = displacements(radius).astype(np.intp)
    ii = np.clip(i[..., None] + d[:, 1], 0, h - 1)
    jj = np.clip(j[..., None] + d[:, 0], 0, w - 1)
    idx = (ii * w + jj)[..., None] * c + np.arange(c)
    idx.setflags(write=False)
    return idx


def neighbours(feat: Tensor, radius: int) -> Tensor:
    h, w, c = feat.shape
    return feat.take(_neighbour_index(h, w, c, radius))


def temporal_cv(f_t, f_t1, flow_init=None, radius: int = RADIUS) -> CostVolume:
    """``score(p, d) = <f_t(p), w(f_t1)(p + d)> / C`` with ``w`` the backward warp."""
    f_t, f_t1 = as_tensor(f_t), as_tensor(f_t1)
    if f_t.shape != f_t1.shape:
        raise ValueError(f"feature extents differ: {f_t.shape} vs {f_t1.shape}")
    if radius < 0:
        raise ValueError("radius must be non-negative")
    c = f_t.shape[2]
    if flow_init is not None:
        f_t1 = warp(f_t1, flow_init)
    nb = neighbours(f_t1, radius)
    scores = (nb * f_t.reshape(f_t.shape[0], f_t.shape[1], 1, c)).sum(axis=-1) * (1.0 / c)
    return CostVolume(scores, radius)


def cosine_topk(g: np.ndarray, radius: int, k: int) -> np.ndarray:
    """0/1 selection ``(h, w, D)`` of the k most cosine-similar window neighbours.

    The centre slot is never a candidate; ties resolve in volume order.
    """
    h, w, c = g.shape
    nb = g.reshape(-1)[_neighbour_index(h, w, c, radius)]
    dots = np.einsum("hwdc,hwc->hwd", nb, g)
    norms = np.linalg.norm(nb, axis=-1) * np.linalg.norm(g, axis=-1)[..., None]
    sim = np.divide(dots, norms, out=np.zeros_like(dots), where=norms > 0)
    centre = (2 * radius + 1) ** 2 // 2
    sim[..., centre] = -np.inf
    order = np.argsort(-sim, axis=-1, kind="stable")[..., :k]
    mask = np.zeros_like(sim)
    np.put_along_axis(mask, order, 1.0, axis=-1)
    return mask


def sca_cv(f_t, kernel, window: int = SCA_WINDOW, k: int = SCA_K) -> CostVolume:
    """Spatial-context attention volume.

    Features are projected by the learnable ``kernel`` (C x C); within the
    sliding window the ``k`` most cosine-similar neighbours are selected
    and ``cv(p, q - p) = <g(q), g(p)> / k`` is written into their slots, so
    the per-pixel sum is the mean of the k products.  With an identity
    kernel this is the plain feature product.  Selection is a constant
    mask: gradients reach only the selected entries.
    """
    if window < 3 or window % 2 == 0:
        raise ValueError("window must be odd and at least 3")
    if k < 1 or k > window * window - 1:
        raise ValueError(f"k={k} exceeds the {window * window - 1} window candidates")
    f_t, kernel = as_tensor(f_t), as_tensor(kernel)
    h, w, c = f_t.shape
    radius = window // 2
    g = (f_t.reshape(h * w, c) @ kernel).reshape(h, w, c)
    mask = cosine_topk(g.data, radius, k)
    prods = (neighbours(g, radius) * g.reshape(h, w, 1, c)).sum(axis=-1)
    return CostVolume(prods * (mask / k), radius)


def _minmax(values: Tensor) -> tuple[Tensor, float, float]:
    flat = values.reshape(-1)
    lo_i = int(np.argmin(flat.data))
    hi_i = int(np.argmax(flat.data))
    lo, hi = float(flat.data[lo_i]), float(flat.data[hi_i])
    if hi - lo <= 0:
        return Tensor(np.full(values.shape, 0.5)), lo, hi
    lo_t = flat.take(np.array(lo_i))
    hi_t = flat.take(np.array(hi_i))
    return (values - lo_t) / (hi_t - lo_t), lo, hi


def normalize(cv: CostVolume) -> CostVolume:
    """Min-max normalize to [0, 1]; a constant volume maps to 0.5."""
    vals, lo, hi = _minmax(cv.values)
    return CostVolume(vals, cv.radius, lo, hi)


def fuse_cv(cv_temp: CostVolume, cv_spa: CostVolume, alpha: float = FUSE_ALPHA) -> CostVolume:
    """Residual fusion ``cv_temp + alpha * cv_spa`` followed by min-max normalization."""
    if cv_temp.shape != cv_spa.shape or cv_temp.radius != cv_spa.radius:
        raise ValueError("cost volume layouts differ")
    return normalize(CostVolume(cv_temp.values + cv_spa.values * alpha, cv_temp.radius))


def save_stack(path, cv: CostVolume) -> None:
    """Dump a volume as a 1-channel PFM with the D slices stacked vertically."""
    from .io import write_pfm

    v = cv.numpy()
    write_pfm(path, np.concatenate([v[..., d] for d in range(v.shape[2])], axis=0))


def load_stack(path, radius: int = RADIUS) -> CostVolume:
    """Inverse of :func:`save_stack`; the result is not normalized."""
    from .io import read_pfm

    a = np.asarray(read_pfm(path), dtype=np.float64)
    d = (2 * radius + 1) ** 2
    if a.ndim != 2 or a.shape[0] % d:
        raise ValueError(f"stack of {a.shape} rows does not hold {d} slices")
    return CostVolume(Tensor(np.stack(np.split(a, d, axis=0), axis=-1)), radius)
