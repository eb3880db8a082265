"""Motion prior-aware spatial attention: collapse each frame's patch grid
into one feature by soft-attending over the patches that move the most.

Motion magnitude of a patch is the channel-norm of its second temporal
difference, 2*x[t] - x[t-1] - x[t+1], with replicate padding at both ends
(so boundary frames degrade to a first difference). Per frame, the K
largest-motion patches are selected (ties broken toward the smallest
flattened index) and combined with softmax(motion) weights.

All functions accept either numpy arrays or autodiff Tensors and return
the matching kind; top-K selection indices are constants of the forward
pass, gradients flow through the selected magnitudes and features.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def _as_tensor(x) -> tuple[Tensor, bool]:
    if isinstance(x, Tensor):
        return x, True
    return Tensor(np.asarray(x)), False


def motion_magnitude(patch_feats):
    """Per-patch motion field [T x H x W] from patch features [T x H x W x D]."""
    pf, was_tensor = _as_tensor(patch_feats)
    if pf.ndim != 4:
        raise ValueError(f"patch features must be [T x H x W x D], got shape {pf.shape}")
    t = pf.shape[0]
    idx_prev = np.maximum(np.arange(t) - 1, 0)
    idx_next = np.minimum(np.arange(t) + 1, t - 1)
    diff = 2.0 * pf - ad.take_rows(pf, idx_prev) - ad.take_rows(pf, idx_next)
    mo = ad.sqrt(ad.tsum(diff * diff, axis=-1))
    return mo if was_tensor else mo.data


def top_motion_indices(motion: np.ndarray, k: int) -> np.ndarray:
    """Flattened per-frame indices of the K largest magnitudes, [T x K].

    Stable sort on the negated magnitudes keeps equal-motion patches in
    flattened order, which pins the tie-break deterministically.
    """
    t = motion.shape[0]
    flat = motion.reshape(t, -1)
    if not 1 <= k <= flat.shape[1]:
        raise ValueError(f"K={k} out of range for {flat.shape[1]} patches")
    order = np.argsort(-flat, axis=1, kind="stable")
    return order[:, :k]


def aggregate(patch_feats, motion, k: int):
    """Motion-weighted spatial feature [T x D].

    Per frame: take the K highest-motion patches, softmax their
    magnitudes, return the attention-weighted sum of their features.
    """
    pf, pf_tensor = _as_tensor(patch_feats)
    mo, mo_tensor = _as_tensor(motion)
    t, h, w, d = pf.shape
    hw = h * w
    sel = top_motion_indices(mo.data, k)  # [T x K], constants
    flat_sel = (np.arange(t)[:, None] * hw + sel).reshape(-1)

    mo_flat = ad.reshape(mo, (t * hw,))
    top_mo = ad.reshape(ad.take_rows(mo_flat, flat_sel), (t, k))
    attn = ad.softmax(top_mo, axis=1)  # [T x K]

    pf_flat = ad.reshape(pf, (t * hw, d))
    top_feats = ad.reshape(ad.take_rows(pf_flat, flat_sel), (t, k, d))
    weighted = ad.tsum(ad.reshape(attn, (t, k, 1)) * top_feats, axis=1)
    return weighted if (pf_tensor or mo_tensor) else weighted.data


def attention_weights(motion: np.ndarray, k: int) -> np.ndarray:
    """Softmax attention over the selected top-K magnitudes, [T x K]."""
    sel = top_motion_indices(motion, k)
    t = motion.shape[0]
    top = motion.reshape(t, -1)[np.arange(t)[:, None], sel]
    shifted = top - top.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)
