"""Training objectives.

  top-k classification  BCE between the video label and the mean of the k
                        largest frame confidences
  MIL alignment         per class, mean of the k largest similarities in
                        that column; softmax over classes at temperature
                        tau; cross-entropy against the category label
  prompt dispersion     sum over ordered pairs of distinct prompt rows of
                        the positive part of their cosine similarity

The same k serves both MIL poolings: k = T // 16 + 1. Gradients flow 1/k
to the selected entries; selection indices are constants with ties broken
toward the smaller index.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

BCE_EPS = 1e-7


@dataclass
class LossWeights:
    alpha: float = 0.9
    beta: float = 2.0
    tau: float = 0.07
    k_divisor: int = 16

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be non-negative")
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.k_divisor < 1:
            raise ValueError("k_divisor must be at least 1")

    def k_for_length(self, t: int) -> int:
        return t // self.k_divisor + 1


@dataclass
class LossBreakdown:
    l_class: float
    l_align: float
    l_const: float
    total: float


def _as_tensor(x):
    if isinstance(x, Tensor):
        return x, True
    return Tensor(np.asarray(x)), False


def _top_k_indices(values: np.ndarray, k: int) -> np.ndarray:
    return np.argsort(-values, kind="stable")[:k]


def topk_class_loss(confidences, y_b: int, k: int):
    """BCE against the mean of the k largest confidences."""
    a, was_tensor = _as_tensor(confidences)
    t = a.shape[0]
    if k < 1:
        raise ValueError(f"k must be positive, got {k}")
    if k > t:
        warnings.warn(f"k={k} exceeds video length {t}; clamping to {t}", stacklevel=2)
        k = t
    sel = _top_k_indices(a.data, k)
    p = ad.clip(ad.tmean(ad.take_rows(a, sel)), BCE_EPS, 1.0 - BCE_EPS)
    if y_b == 1:
        loss = -ad.log(p)
    else:
        loss = -ad.log(1.0 - p)
    return loss if was_tensor else loss.item()


def mil_align_loss(align_matrix, y_c: int, k: int, tau: float):
    """Cross-entropy between softmax of per-class pooled similarities and y_c."""
    m, was_tensor = _as_tensor(align_matrix)
    t, num_classes = m.shape
    if not 0 <= y_c < num_classes:
        raise ValueError(f"category index {y_c} out of range for {num_classes} classes")
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    k = min(max(k, 1), t)
    cols = ad.transpose(m)  # [(1+C) x T]
    sel = np.argsort(-cols.data, axis=1, kind="stable")[:, :k]
    flat = (np.arange(num_classes)[:, None] * t + sel).reshape(-1)
    pooled = ad.tmean(ad.reshape(ad.take_rows(ad.reshape(cols, (num_classes * t,)), flat), (num_classes, k)), axis=1)
    log_probs = ad.log_softmax(pooled / tau, axis=0)
    loss = -ad.take_rows(log_probs, np.array([y_c]))
    loss = ad.reshape(loss, ())
    return loss if was_tensor else loss.item()


def prompt_contrastive_loss(prompt_matrix):
    """Dispersion penalty: positive cosines between distinct prompt rows."""
    p, was_tensor = _as_tensor(prompt_matrix)
    rows = p.shape[0]
    sq = ad.tsum(p * p, axis=1, keepdims=True)
    if np.any(sq.data <= 0):
        raise ValueError("prompt matrix has a zero row")
    unit = p / ad.sqrt(sq)
    cosines = ad.matmul(unit, ad.transpose(unit))
    off_diag = ad.constant((1.0 - np.eye(rows)).astype(p.dtype))
    loss = ad.tsum(ad.relu(cosines * off_diag))
    return loss if was_tensor else loss.item()


def total_loss(l_class: float, l_align: float, l_const: float, weights: LossWeights) -> LossBreakdown:
    total = l_class + weights.alpha * l_align + weights.beta * l_const
    return LossBreakdown(float(l_class), float(l_align), float(l_const), float(total))
