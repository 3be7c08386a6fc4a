"""Consistency, reconstruction, joint and entropy losses."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Union

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

DELTA = 1e-12
DEFAULT_LAMBDA = 0.5
PROB_TOL = 1e-6


class EmptyMaskWarning(UserWarning):
    pass


@dataclass
class LossBreakdown:
    """Per-step loss values.

    ``l_total == l_con + lam * l_rec`` for the masking methods; the entropy
    baseline reports its loss in ``l_ent`` (and ``l_total``) instead.
    """

    l_con: float
    l_rec: float
    l_total: float
    lam: float
    rec_empty: bool = False
    l_ent: float = 0.0


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def check_probabilities(p, what: str = "input") -> None:
    d = _data(p)
    if (d < 0).any() or not np.allclose(d.sum(axis=-1), 1.0, rtol=0.0, atol=PROB_TOL):
        raise ValueError(f"{what} is not a probability vector (nonnegative, rows summing to 1)")


def consistency_loss(y, y_hat: Tensor, stop_gradient: bool = True) -> Tensor:
    """-(1/C) sum_c y(c) log(y_hat(c) + delta), averaged over the batch.

    ``y`` comes from the original image and ``y_hat`` from the masked one.
    With ``stop_gradient`` the original prediction is a fixed soft target.
    """
    check_probabilities(y, "original prediction y")
    check_probabilities(y_hat, "masked prediction y_hat")
    if _data(y).shape != y_hat.shape:
        raise ShapeError(f"consistency_loss: y {_data(y).shape} vs y_hat {y_hat.shape}")
    target = Tensor(_data(y)) if stop_gradient or not isinstance(y, Tensor) else y
    c = y_hat.shape[-1]
    per = T.sum(T.mul(target, T.log(T.add(y_hat, DELTA))), axis=-1)
    return T.scale(T.mean(per), -1.0 / c)


def reconstruction_loss(pred: Tensor, target) -> Tensor:
    """Mean squared error over all M*K entries; the target carries no gradient."""
    target = np.asarray(_data(target), dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"reconstruction_loss: prediction {pred.shape} vs target {target.shape}")
    if pred.shape[0] == 0:
        warnings.warn("no masked tokens; reconstruction loss is 0", EmptyMaskWarning, stacklevel=2)
        return Tensor(0.0)
    diff = T.sub(pred, Tensor(target))
    return T.mean(T.mul(diff, diff))


def total_loss(l_con: Union[Tensor, float], l_rec: Union[Tensor, float], lam: float = DEFAULT_LAMBDA):
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    if isinstance(l_con, Tensor) or isinstance(l_rec, Tensor):
        return T.add(l_con, T.scale(T.as_tensor(l_rec), lam))
    return l_con + lam * l_rec


def entropy_loss(y_hat: Tensor) -> Tensor:
    """Shannon entropy of each prediction, averaged over the batch."""
    check_probabilities(y_hat, "prediction")
    per = T.sum(T.mul(y_hat, T.log(T.add(y_hat, DELTA))), axis=-1)
    return T.scale(T.mean(per), -1.0)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Supervised loss for source pretraining; ``labels`` are class indices."""
    labels = np.asarray(labels, dtype=np.int64)
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    per = T.sum(T.mul(T.log_softmax(logits), Tensor(onehot)), axis=-1)
    return T.scale(T.mean(per), -1.0)
