"""Distribution-aware masking: MC-dropout token uncertainty and top-P% selection."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import rng
from . import tensor as T
from .vit import TokenBatch, VisionTransformer

DEFAULT_PASSES = 10
DEFAULT_RATIO = 50.0
STRATEGIES = ("dam", "random")


@dataclass
class MaskPlan:
    uncertainty: np.ndarray  # [N], nonnegative
    selected: np.ndarray  # strictly increasing token indices
    ratio: float
    strategy: str

    def __len__(self) -> int:
        return len(self.selected)


def mask_count(n: int, ratio: float) -> int:
    """round(ratio * n / 100), halves rounded up."""
    return int(math.floor(ratio * n / 100.0 + 0.5))


def pooled_uncertainty(values: np.ndarray) -> np.ndarray:
    """Root-mean-square deviation over axis 0 (the MC passes).

    The mean is taken relative to the first pass so that identical passes
    give exactly zero.
    """
    values = np.asarray(values, dtype=np.float64)
    shifted = values - values[0]
    mu = shifted.mean(axis=0)
    dev = shifted - mu
    return np.sqrt((dev * dev).mean(axis=0))


def token_uncertainty(
    model: VisionTransformer, tokens: TokenBatch, m: int = DEFAULT_PASSES, seed: int = 0
) -> np.ndarray:
    """Per-token MC-dropout uncertainty, shape [B, N].

    Runs positional addition plus block 1 only, ``m`` times with dropout in
    block 1's FFN hidden layer.  Each pass reduces a token to the mean of its
    D features.  Nothing is recorded for differentiation.
    """
    if m < 2:
        raise ValueError(f"token_uncertainty needs m >= 2 passes, got {m}")
    b, n = tokens.mask_flags.shape
    with T.inference():
        emb = T.Tensor(np.concatenate([tokens.embeddings.data] * m, axis=0))
        stacked = TokenBatch(emb, tokens.positional, np.tile(tokens.mask_flags, (m, 1)))
        seeds = [rng.derive_seed(seed, "mc-pass", i, j) for i in range(m) for j in range(b)]
        feats = model.block1(stacked, dropout=True, seed=seeds).data
    pooled = feats.mean(axis=-1).reshape(m, b, n)
    return pooled_uncertainty(pooled)


def select_mask(scores, ratio: float = DEFAULT_RATIO, strategy: str = "dam", seed: int = 0) -> MaskPlan:
    """Pick round(ratio*N/100) tokens.

    ``dam`` takes the highest scores (ties go to the lower index); ``random``
    samples uniformly without replacement from ``seed``.  Indices come back
    sorted.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if scores.size < 1:
        raise ValueError("select_mask needs at least one token score")
    if not 0.0 <= ratio <= 100.0:
        raise ValueError(f"mask ratio must lie in [0, 100], got {ratio}")
    k = mask_count(scores.size, ratio)
    if strategy == "dam":
        chosen = np.argsort(-scores, kind="stable")[:k]
    elif strategy == "random":
        chosen = rng.stream(seed, "random-mask").choice(scores.size, size=k, replace=False)
    else:
        raise ValueError(f"unknown masking strategy {strategy!r}; expected one of {STRATEGIES}")
    return MaskPlan(scores, np.sort(chosen).astype(np.int64), float(ratio), strategy)
