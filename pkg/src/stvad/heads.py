"""Dual scoring branches: a one-neuron sigmoid classifier over the adapted
features, and a cosine alignment matrix between combined frame embeddings
and the prompt rows. The final per-frame anomaly score is one minus the
softmax mass the alignment row assigns to the normal class.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DataError


@dataclass
class HeadParams:
    weight: Tensor  # [D]
    bias: Tensor  # scalar

    def tensors(self) -> list[tuple[str, Tensor]]:
        return [("weight", self.weight), ("bias", self.bias)]


def init_head_params(d: int, dtype=np.float32) -> HeadParams:
    # zero init: every frame starts at confidence 0.5
    return HeadParams(
        weight=Tensor(np.zeros(d, dtype=dtype), requires_grad=True),
        bias=Tensor(np.zeros((), dtype=dtype), requires_grad=True),
    )


def classify(adapted, params: HeadParams):
    """Frame anomaly confidences in (0,1): sigmoid(w . x + b), [T]."""
    x = adapted if isinstance(adapted, Tensor) else Tensor(np.asarray(adapted))
    if x.ndim != 2 or x.shape[1] != params.weight.shape[0]:
        raise ValueError(f"adapted features {x.shape} do not match weight {params.weight.shape}")
    logits = ad.tsum(x * params.weight, axis=1) + params.bias
    out = ad.sigmoid(logits)
    return out if isinstance(adapted, Tensor) else out.data


def _row_normalize(x: Tensor, what: str) -> Tensor:
    sq = ad.tsum(x * x, axis=-1, keepdims=True)
    if np.any(sq.data <= 0):
        raise DataError(f"degenerate embedding: zero-norm row in {what}")
    return x / ad.sqrt(sq)


def align(frame_feats, adapted, prompt_matrix):
    """Cosine similarity matrix [T x (1+C)] between frame_feats + adapted
    and each prompt row."""
    ft = frame_feats if isinstance(frame_feats, Tensor) else Tensor(np.asarray(frame_feats))
    at = adapted if isinstance(adapted, Tensor) else Tensor(np.asarray(adapted))
    pm = prompt_matrix if isinstance(prompt_matrix, Tensor) else Tensor(np.asarray(prompt_matrix))
    if ft.shape != at.shape:
        raise ValueError(f"shape mismatch: frame {ft.shape} vs adapted {at.shape}")
    if ft.shape[1] != pm.shape[1]:
        raise ValueError(f"dimension mismatch: frames D={ft.shape[1]}, prompts D={pm.shape[1]}")
    combined = _row_normalize(ft + at, "combined frame embedding")
    prompts = _row_normalize(pm, "prompt matrix")
    out = ad.matmul(combined, ad.transpose(prompts))
    if isinstance(frame_feats, Tensor) or isinstance(adapted, Tensor) or isinstance(prompt_matrix, Tensor):
        return out
    return out.data


def frame_anomaly_score(align_matrix: np.ndarray, tau: float) -> np.ndarray:
    """Per-frame score in (0,1): 1 - softmax(row / tau) at the normal class."""
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    m = np.asarray(align_matrix, dtype=np.float64)
    logits = m / tau
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    normal_mass = e[:, 0] / e.sum(axis=1)
    return 1.0 - normal_mass
