"""KL / JS divergences between smoothed histograms and adjacent-domain tables."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

SMOOTHING = 1e-10
DEFAULT_BINS = 64


@dataclass
class Histogram:
    counts: np.ndarray
    edges: Optional[np.ndarray] = None


def _pair(p, q) -> tuple:
    pe = getattr(p, "edges", None)
    qe = getattr(q, "edges", None)
    p = np.asarray(getattr(p, "counts", p), dtype=np.float64)
    q = np.asarray(getattr(q, "counts", q), dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise ValueError(f"histograms must share binning: got {p.shape} and {q.shape}")
    if pe is not None and qe is not None and not np.array_equal(pe, qe):
        raise ValueError("histograms use different bin edges")
    if (p < 0).any() or (q < 0).any() or p.sum() <= 0 or q.sum() <= 0:
        raise ValueError("histograms need nonnegative mass with a positive total")
    return smooth(p), smooth(q)


def smooth(h: np.ndarray, eps: float = SMOOTHING) -> np.ndarray:
    """Normalise, add ``eps`` to every bin, renormalise."""
    h = np.asarray(h, dtype=np.float64)
    h = h / h.sum() + eps
    return h / h.sum()


def _kl(p: np.ndarray, q: np.ndarray) -> float:
    return float(np.sum(p * np.log(p / q)))


def kl(p, q) -> float:
    """Kullback-Leibler divergence KL(p || q), natural log, after smoothing."""
    p, q = _pair(p, q)
    return _kl(p, q)


def js(p, q) -> float:
    """Jensen-Shannon divergence; bounded by ln 2."""
    p, q = _pair(p, q)
    m = 0.5 * (p + q)
    return 0.5 * _kl(p, m) + 0.5 * _kl(q, m)


@dataclass
class DivergenceTable:
    pairs: list  # (domain_i, domain_{i+1})
    values: list  # JS per adjacent pair
    edges: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def mean(self) -> float:
        return float(np.mean(self.values)) if self.values else 0.0


def common_edges(samples: Sequence[np.ndarray], bins: int = DEFAULT_BINS) -> np.ndarray:
    allv = np.concatenate([np.asarray(s, dtype=np.float64).reshape(-1) for s in samples])
    lo, hi = float(allv.min()), float(allv.max())
    if hi <= lo:
        lo, hi = lo - 0.5, hi + 0.5
    return np.linspace(lo, hi, bins + 1)


def divergence_table(domains: Sequence[str], samples: Sequence[np.ndarray], bins: int = DEFAULT_BINS) -> DivergenceTable:
    """JS between each consecutive pair of domains on one shared uniform binning."""
    if len(domains) != len(samples):
        raise ValueError("one sample set per domain is required")
    for d, s in zip(domains, samples):
        if len(s) == 0:
            raise ValueError(f"domain {d!r} has no feature samples")
    edges = common_edges(samples, bins)
    hists = [np.histogram(np.asarray(s, dtype=np.float64), bins=edges)[0] for s in samples]
    pairs, values = [], []
    for i in range(len(domains) - 1):
        pairs.append((domains[i], domains[i + 1]))
        values.append(js(Histogram(hists[i], edges), Histogram(hists[i + 1], edges)))
    return DivergenceTable(pairs, values, edges)


LN2 = math.log(2.0)
