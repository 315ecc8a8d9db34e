"""Training objectives: photometric, stereo depth, rigid-flow, consistency,
self-supervision and their weighted total."""

from __future__ import annotations

import csv
from dataclasses import dataclass, fields

import numpy as np

from .tensor import Tensor, as_tensor, concat, laplacian, warp, warp_with_mask

TERMS = ("depth", "pho", "geo", "consis", "self", "kl")


@dataclass(frozen=True)
class SparseNorm:
    """``psi(x) = (|x| + eps)^p``."""

    p: float = 0.4
    eps: float = 1e-2

    def __post_init__(self):
        if not 0 < self.p <= 1:
            raise ValueError("p must lie in (0, 1]")
        if self.eps <= 0:
            raise ValueError("eps must be positive")

    @property
    def floor(self) -> float:
        return self.eps ** self.p


@dataclass(frozen=True)
class LossWeights:
    depth: float = 1.0
    pho: float = 1.0
    geo: float = 0.1
    consis: float = 1.0
    self: float = 1.0
    kl: float = 0.1

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"weight {f.name} must be finite and non-negative")

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def replace(w, /, **kw) -> "LossWeights":
        return LossWeights(**{**w.as_dict(), **kw})


def sparse_lp(x, norm: SparseNorm = SparseNorm()) -> Tensor:
    """Elementwise penalty; a trailing channel axis of a 3-D grid is summed."""
    x = as_tensor(x)
    out = (x.abs() + norm.eps) ** norm.p
    return out.sum(axis=-1) if x.ndim == 3 else out


def _masked_mean(values: Tensor, keep: np.ndarray, what: str) -> Tensor:
    keep = np.asarray(keep, dtype=np.float64)
    denom = keep.sum()
    if denom <= 0:
        raise ValueError(f"{what}: no unmasked pixels")
    return (values * keep).sum() * (1.0 / denom)


def _check_extent(a, b, what: str) -> None:
    if as_tensor(a).shape != as_tensor(b).shape:
        raise ValueError(f"{what}: extents differ")


def photometric_flow_loss(I_t, I_t1, F_f, F_b, O_f, O_b, norm: SparseNorm = SparseNorm()) -> Tensor:
    """Bidirectional occlusion-masked photometric penalty, count-normalized per direction."""
    I_t, I_t1 = as_tensor(I_t), as_tensor(I_t1)
    _check_extent(I_t, I_t1, "photometric")
    fwd = sparse_lp(I_t - warp(I_t1, F_f), norm)
    bwd = sparse_lp(I_t1 - warp(I_t, F_b), norm)
    return (_masked_mean(fwd, 1.0 - np.asarray(O_f), "forward photometric")
            + _masked_mean(bwd, 1.0 - np.asarray(O_b), "backward photometric"))


def _stereo_photometric(I_l, I_r, disp, norm: SparseNorm) -> Tensor:
    disp = as_tensor(disp)
    h, w = disp.shape
    zeros = Tensor(np.zeros((h, w, 1)))
    flow = concat([-disp.reshape(h, w, 1), zeros], axis=-1)
    warped, oob = warp_with_mask(I_r, flow)
    return _masked_mean(sparse_lp(as_tensor(I_l) - warped, norm), ~oob, "stereo photometric")


def smoothness(disp, image) -> Tensor:
    """Mean ``|lap D| * exp(-|lap I|)`` with the image Laplacian channel-averaged."""
    disp = as_tensor(disp)
    lap_i = np.abs(laplacian(np.asarray(image.data if isinstance(image, Tensor) else image)).data)
    if lap_i.ndim == 3:
        lap_i = lap_i.mean(axis=-1)
    if lap_i.shape != disp.shape:
        raise ValueError("smoothness: extents differ")
    return (laplacian(disp).abs() * np.exp(-lap_i)).mean()


def depth_loss(I_t_l, I_t_r, I_t1_l, I_t1_r, D_t, D_t1, norm: SparseNorm = SparseNorm()) -> Tensor:
    """Stereo photometric plus edge-aware second-order smoothness, both frames.

    ``D`` is left-image disparity in pixels: ``I_l(x) ~ I_r(x - D)``.
    Samples that fall outside the right image are left out of the mean.
    """
    for l, r, d in ((I_t_l, I_t_r, D_t), (I_t1_l, I_t1_r, D_t1)):
        _check_extent(l, r, "depth")
        if as_tensor(l).shape[:2] != as_tensor(d).shape:
            raise ValueError("depth: disparity extent differs from the images")
    return (_stereo_photometric(I_t_l, I_t_r, D_t, norm)
            + smoothness(D_t, I_t_l)
            + _stereo_photometric(I_t1_l, I_t1_r, D_t1, norm)
            + smoothness(D_t1, I_t1_l))


def geo_flow_loss(F, F_rigid, V) -> Tensor:
    """L1 between estimated and rigid flow over the rigid region ``V == 0``."""
    F, F_rigid = as_tensor(F), as_tensor(F_rigid)
    _check_extent(F, F_rigid, "geo")
    l1 = (F - F_rigid).abs().sum(axis=-1)
    return _masked_mean(l1, 1.0 - np.asarray(V, dtype=np.float64), "geo")


def _l1(a, b, reduction: str, what: str) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_extent(a, b, what)
    d = (a - b).abs()
    if reduction == "sum":
        return d.sum()
    if reduction == "mean":
        return d.sum() * (1.0 / (d.size // d.shape[-1]))
    raise ValueError(f"unknown reduction {reduction!r}")


def consistency_loss(F_syn, F, reduction: str = "sum") -> Tensor:
    """Unmasked L1 between the synthetic-fog flow and the clean-branch flow."""
    return _l1(F_syn, F, reduction, "consistency")


def self_supervised_loss(F_real, F_pseudo, reduction: str = "sum") -> Tensor:
    """L1 to pseudo-labels; the labels are detached so only ``F_real`` trains."""
    return _l1(F_real, as_tensor(F_pseudo).detach(), reduction, "self-supervised")


def total_loss(terms: dict, weights: LossWeights = LossWeights()) -> Tensor:
    """Weighted sum of the named terms; absent terms count as zero."""
    unknown = set(terms) - set(TERMS)
    if unknown:
        raise KeyError(f"unknown loss terms {sorted(unknown)}")
    w = weights.as_dict()
    total = Tensor(0.0)
    for name in TERMS:
        if name not in terms:
            continue
        term = as_tensor(terms[name])
        if not np.all(np.isfinite(term.data)):
            raise FloatingPointError(f"loss term {name!r} is not finite")
        if w[name] != 0:
            total = total + term * w[name]
    return total


class LossLog:
    """Accumulates per-step term values and writes them as CSV."""

    def __init__(self):
        self.rows: list[dict] = []

    def record(self, step: int, stage: str, terms: dict, total) -> None:
        row = {"step": step, "stage": stage}
        for name in TERMS:
            row[name] = float(as_tensor(terms[name]).data) if name in terms else ""
        row["total"] = float(as_tensor(total).data)
        self.rows.append(row)

    def totals(self, stage: str | None = None) -> list[float]:
        return [r["total"] for r in self.rows if stage is None or r["stage"] == stage]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=["step", "stage", *TERMS, "total"],
                                    lineterminator="\n")
            writer.writeheader()
            for r in self.rows:
                writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
