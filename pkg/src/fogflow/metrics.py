"""Flow metrics: endpoint error, F1-all outliers and per-region reports."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

OUTLIER_PX = 3.0
OUTLIER_REL = 0.05


def _prepare(pred, gt, valid):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 3 or pred.shape[2] != 2:
        raise ValueError(f"flow extents differ or are not (H, W, 2): {pred.shape} vs {gt.shape}")
    if valid is None:
        valid = np.ones(pred.shape[:2], dtype=bool)
    valid = np.asarray(valid).astype(bool)
    if valid.shape != pred.shape[:2]:
        raise ValueError("valid mask extent differs from the flow")
    if not valid.any():
        raise ValueError("empty valid mask")
    return pred, gt, valid


def endpoint_errors(pred, gt) -> np.ndarray:
    return np.linalg.norm(np.asarray(pred, dtype=np.float64) - np.asarray(gt, dtype=np.float64), axis=-1)


def epe(pred, gt, valid=None) -> float:
    """Mean endpoint error over valid pixels."""
    pred, gt, valid = _prepare(pred, gt, valid)
    return float(endpoint_errors(pred, gt)[valid].mean())


def f1_all(pred, gt, valid=None) -> float:
    """Fraction of valid pixels whose error exceeds 3 px and 5% of the true magnitude."""
    pred, gt, valid = _prepare(pred, gt, valid)
    err = endpoint_errors(pred, gt)
    mag = np.linalg.norm(gt, axis=-1)
    out = (err > OUTLIER_PX) & (err > OUTLIER_REL * mag)
    return float(out[valid].mean())


def depth_band_report(pred, gt, depth, bands, valid=None) -> list[dict]:
    """EPE per depth band ``[lo, hi)``; empty bands are marked absent (``epe`` is None)."""
    pred, gt, valid = _prepare(pred, gt, valid)
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != pred.shape[:2]:
        raise ValueError("depth extent differs from the flow")
    edges = np.asarray(bands, dtype=np.float64)
    if edges.ndim != 1 or edges.size < 2 or np.any(np.diff(edges) <= 0):
        raise ValueError("bands must be at least two strictly ascending edges")
    err = endpoint_errors(pred, gt)
    rows = []
    for k, (lo, hi) in enumerate(zip(edges[:-1], edges[1:])):
        last = k == edges.size - 2
        sel = valid & (depth >= lo) & ((depth <= hi) if last else (depth < hi))
        n = int(sel.sum())
        rows.append({"lo": float(lo), "hi": float(hi), "count": n,
                     "epe": float(err[sel].mean()) if n else None})
    return rows


@dataclass
class EvalReport:
    epe: float
    f1_all: float
    count: int
    regions: dict = field(default_factory=dict)
    bands: list = field(default_factory=list)

    def __post_init__(self):
        if not self.epe >= 0:
            raise ValueError("epe must be non-negative")
        if not 0 <= self.f1_all <= 1:
            raise ValueError("f1_all must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(float(d["epe"]), float(d["f1_all"]), int(d["count"]),
                   dict(d.get("regions", {})), list(d.get("bands", [])))

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls.from_dict(json.loads(text))


def evaluate(pred, gt, valid=None, nonrigid=None, depth=None, bands=None) -> EvalReport:
    """Full report: overall, rigid / non-rigid breakdown and optional depth bands."""
    pred, gt, valid = _prepare(pred, gt, valid)
    regions = {}
    if nonrigid is not None:
        nr = np.asarray(nonrigid).astype(bool)
        for name, sel in (("rigid", valid & ~nr), ("nonrigid", valid & nr)):
            regions[name] = ({"epe": epe(pred, gt, sel), "f1_all": f1_all(pred, gt, sel),
                              "count": int(sel.sum())} if sel.any() else None)
    band_rows = depth_band_report(pred, gt, depth, bands, valid) if depth is not None and bands is not None else []
    return EvalReport(epe(pred, gt, valid), f1_all(pred, gt, valid), int(valid.sum()), regions, band_rows)


def aggregate(reports: list[EvalReport]) -> EvalReport:
    """Pixel-weighted mean of several reports (regions and bands are dropped)."""
    if not reports:
        raise ValueError("no reports to aggregate")
    n = np.array([r.count for r in reports], dtype=np.float64)
    e = np.array([r.epe for r in reports])
    f = np.array([r.f1_all for r in reports])
    return EvalReport(float((n * e).sum() / n.sum()), float((n * f).sum() / n.sum()), int(n.sum()))
