"""Correlation distribution alignment.

Correlations sampled from a normalized cost volume are binned into
``k`` classes with add-one smoothing, ``p_i = (n_i + 1) / (N + k)``, and two
domains are aligned by the KL divergence of their histograms.  Training uses
a soft bin assignment so the loss reaches the cost-volume entries.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .costvolume import CostVolume
from .tensor import Tensor, as_tensor, softmax

N_SAMPLES = 1000
K_CDA = 10
SOFT_T = 0.05


@dataclass
class CdaConfig:
    N: int = N_SAMPLES
    k_cda: int = K_CDA
    thresholds: tuple = ()
    seed: int = 0
    temperature: float = SOFT_T

    def __post_init__(self):
        if self.k_cda < 2:
            raise ValueError("k_cda must be at least 2")
        if self.N < self.k_cda:
            raise ValueError("N must be at least k_cda")
        if not self.thresholds:
            self.thresholds = tuple(i / self.k_cda for i in range(1, self.k_cda))
        th = np.asarray(self.thresholds, dtype=np.float64)
        if th.size != self.k_cda - 1:
            raise ValueError(f"need {self.k_cda - 1} thresholds, got {th.size}")
        if np.any(np.diff(th) <= 0) or th[0] <= 0 or th[-1] >= 1:
            raise ValueError("thresholds must ascend strictly inside (0, 1)")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        self.thresholds = tuple(float(x) for x in th)

    @property
    def centers(self) -> np.ndarray:
        edges = np.concatenate([[0.0], self.thresholds, [1.0]])
        return 0.5 * (edges[:-1] + edges[1:])

    def to_dict(self) -> dict:
        return {"N": self.N, "k_cda": self.k_cda, "thresholds": list(self.thresholds),
                "seed": self.seed, "temperature": self.temperature}

    @classmethod
    def from_dict(cls, d: dict) -> "CdaConfig":
        return cls(int(d.get("N", N_SAMPLES)), int(d.get("k_cda", K_CDA)),
                   tuple(d.get("thresholds", ())), int(d.get("seed", 0)),
                   float(d.get("temperature", SOFT_T)))


@dataclass
class CorrelationDistribution:
    """Smoothed histogram.  ``probs`` may be a graph node when built softly."""

    probs: Tensor
    counts: np.ndarray | None = None
    N: int = 0
    k: int = 0
    _fractions: list = field(default=None, repr=False)

    @property
    def numpy(self) -> np.ndarray:
        return self.probs.data

    def fractions(self) -> list[Fraction]:
        """Exact rational probabilities (hard histograms only)."""
        if self.counts is None:
            raise ValueError("soft histograms carry no integer counts")
        return [Fraction(int(n) + 1, self.N + self.k) for n in self.counts]

    def detach(self) -> "CorrelationDistribution":
        return CorrelationDistribution(self.probs.detach(), self.counts, self.N, self.k)

    def tolist(self) -> list[float]:
        return [float(x) for x in self.probs.data]


def _slot_values(cv) -> Tensor:
    values = cv.values if isinstance(cv, CostVolume) else as_tensor(cv)
    return values.reshape(-1)


def sample_indices(n_slots: int, cfg: CdaConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    if n_slots < cfg.N:
        raise ValueError(f"cost volume has {n_slots} slots, fewer than N={cfg.N}")
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    return rng.choice(n_slots, size=cfg.N, replace=False)


def sample_correlations(cv, cfg: CdaConfig, rng: np.random.Generator | None = None) -> Tensor:
    """Draw ``N`` slots uniformly without replacement; differentiable gather."""
    flat = _slot_values(cv)
    if isinstance(cv, CostVolume) and not cv.normalized:
        raise ValueError("cost volume must be normalized before sampling")
    return flat.take(sample_indices(flat.size, cfg, rng))


def histogram(samples, cfg: CdaConfig) -> CorrelationDistribution:
    """Hard add-one histogram over the threshold bins."""
    s = np.asarray(samples.data if isinstance(samples, Tensor) else samples, dtype=np.float64).reshape(-1)
    if np.any(~np.isfinite(s)) or np.any(s < 0) or np.any(s > 1):
        raise ValueError("samples must lie in [0, 1]")
    bins = np.searchsorted(np.asarray(cfg.thresholds), s, side="right")
    counts = np.bincount(bins, minlength=cfg.k_cda)
    n, k = s.size, cfg.k_cda
    probs = (counts + 1.0) / (n + k)
    return CorrelationDistribution(Tensor(probs), counts, n, k)


def soft_histogram(samples: Tensor, cfg: CdaConfig) -> CorrelationDistribution:
    """Add-one histogram with softmax(-|c - center| / T) membership."""
    samples = as_tensor(samples)
    n, k = samples.size, cfg.k_cda
    dist = (samples.reshape(n, 1) - cfg.centers.reshape(1, k)).abs()
    member = softmax(dist * (-1.0 / cfg.temperature), axis=1)
    probs = (member.sum(axis=0) + 1.0) * (1.0 / (n + k))
    return CorrelationDistribution(probs, None, n, k)


def kl_loss(p_r: CorrelationDistribution, p_s: CorrelationDistribution) -> Tensor:
    """``sum_i p_r,i * log(p_r,i / p_s,i)``; real-domain histogram on the left."""
    a, b = as_tensor(p_r.probs), as_tensor(p_s.probs)
    if a.shape != b.shape:
        raise ValueError("histograms have different class counts")
    if np.any(a.data <= 0) or np.any(b.data <= 0):
        raise ValueError("histograms must be strictly positive")
    return (a * (a.log() - b.log())).sum()


def kl_value(p_r, p_s) -> float:
    """Closed-form KL on plain probability vectors."""
    a = np.asarray(p_r, dtype=np.float64)
    b = np.asarray(p_s, dtype=np.float64)
    return float(np.sum(a * (np.log(a) - np.log(b))))


def cda_loss(cv_r: CostVolume, cv_s: CostVolume, cfg: CdaConfig,
             rng: np.random.Generator | None = None, soft: bool = True) -> Tensor:
    """KL between the sampled real and synthetic histograms; ``p_s`` is a fixed target."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    s_r = sample_correlations(cv_r, cfg, rng)
    s_s = sample_correlations(cv_s, cfg, rng)
    binning = soft_histogram if soft else histogram
    return kl_loss(binning(s_r, cfg), binning(s_s.detach(), cfg).detach())
