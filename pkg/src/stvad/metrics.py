"""Frame-level ROC AUC and TIoU evaluation.

AUC is the rank statistic (Mann-Whitney), ties contributing half weight;
equivalent to trapezoidal integration of the ROC curve. TIoU here is the
fraction of ground-truth anomalous frames on which some predicted box
overlaps some ground-truth box with IoU at or above the threshold;
definitions in the literature vary, so the threshold is exposed in config.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .feature_io import GroundTruth


def frame_auc(scores: np.ndarray, flags: np.ndarray) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    flags = np.asarray(flags)
    if scores.shape != flags.shape or scores.ndim != 1:
        raise DataError(f"scores {scores.shape} and flags {flags.shape} must be equal-length vectors")
    pos = int(flags.sum())
    neg = len(flags) - pos
    if pos == 0 or neg == 0:
        raise DataError("frame AUC needs both anomalous and normal frames in the ground truth")
    ranks = _average_ranks(scores)
    pos_rank_sum = float(ranks[flags == 1].sum())
    return (pos_rank_sum - pos * (pos + 1) / 2.0) / (pos * neg)


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def roc_points(scores: np.ndarray, flags: np.ndarray) -> list[tuple[float, float]]:
    """(fpr, tpr) pairs swept over the distinct score thresholds."""
    scores = np.asarray(scores, dtype=np.float64)
    flags = np.asarray(flags)
    pos = int(flags.sum())
    neg = len(flags) - pos
    if pos == 0 or neg == 0:
        raise DataError("ROC needs both anomalous and normal frames in the ground truth")
    points = [(0.0, 0.0)]
    for thresh in np.unique(scores)[::-1]:
        hit = scores >= thresh
        points.append((float((hit & (flags == 0)).sum() / neg), float((hit & (flags == 1)).sum() / pos)))
    points.append((1.0, 1.0))
    return points


def box_iou(a, b) -> float:
    """IoU of two (x, y, w, h) rectangles."""
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    ix = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    iy = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = ix * iy
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def tiou_counts(pred_boxes_by_frame: dict[int, list], gt: GroundTruth, iou_threshold: float = 0.5) -> tuple[int, int]:
    """(localized frames, ground-truth anomalous frames) for one video.

    A frame counts as localized when the best IoU between any predicted
    box and any ground-truth box reaches the threshold. Predicted boxes
    may be Box objects or (x, y, w, h[, conf]) sequences.
    """
    hits = 0
    total = 0
    for t, flag in enumerate(gt.frame_flags):
        if flag != 1:
            continue
        total += 1
        preds = pred_boxes_by_frame.get(t, [])
        gt_boxes = gt.boxes[t]
        best = 0.0
        for p in preds:
            rect = p.as_tuple() if hasattr(p, "as_tuple") else tuple(p)[:4]
            for g in gt_boxes:
                best = max(best, box_iou(rect, g))
        if best >= iou_threshold:
            hits += 1
    return hits, total


def tiou(pred_boxes_by_frame: dict[int, list], gt: GroundTruth, iou_threshold: float = 0.5) -> float | None:
    hits, total = tiou_counts(pred_boxes_by_frame, gt, iou_threshold)
    if total == 0:
        return None
    return hits / total


@dataclass
class VideoEval:
    video_id: str
    n_frames: int
    n_anomalous: int
    tiou_hits: int | None = None
    tiou: float | None = None
    auc: float | None = None  # defined only when the video has both frame classes


@dataclass
class EvalReport:
    auc: float
    tiou: float | None
    counts: dict
    per_video: list[VideoEval] = field(default_factory=list)

    def to_json(self) -> str:
        doc = {
            "auc": self.auc,
            "tiou": self.tiou,
            "counts": self.counts,
            "per_video": [
                {
                    "video_id": v.video_id,
                    "n_frames": v.n_frames,
                    "n_anomalous": v.n_anomalous,
                    "tiou_hits": v.tiou_hits,
                    "tiou": v.tiou,
                    "auc": v.auc,
                }
                for v in self.per_video
            ],
        }
        return json.dumps(doc, indent=1, sort_keys=True)


def evaluate(
    scores_by_video: dict[str, np.ndarray],
    flags_by_video: dict[str, np.ndarray],
    pred_boxes: dict[str, dict[int, list]] | None = None,
    gts: dict[str, GroundTruth] | None = None,
    iou_threshold: float = 0.5,
) -> EvalReport:
    """Dataset-level report: pooled frame AUC, pooled TIoU, per-video stats."""
    if set(scores_by_video) != set(flags_by_video):
        raise DataError("scores and ground-truth flags cover different video sets")
    video_ids = sorted(scores_by_video)
    all_scores = []
    all_flags = []
    per_video = []
    total_hits = 0
    total_anom = 0
    for vid in video_ids:
        s = np.asarray(scores_by_video[vid], dtype=np.float64)
        f = np.asarray(flags_by_video[vid])
        if s.shape != f.shape:
            raise DataError(f"{vid}: {len(s)} scores but {len(f)} ground-truth frames")
        all_scores.append(s)
        all_flags.append(f)
        entry = VideoEval(vid, len(f), int(f.sum()))
        if 0 < entry.n_anomalous < entry.n_frames:
            entry.auc = frame_auc(s, f)
        if pred_boxes is not None and gts is not None and vid in gts:
            hits, total = tiou_counts(pred_boxes.get(vid, {}), gts[vid], iou_threshold)
            total_hits += hits
            total_anom += total
            if total > 0:
                entry.tiou_hits = hits
                entry.tiou = hits / total
        per_video.append(entry)
    pooled_auc = frame_auc(np.concatenate(all_scores), np.concatenate(all_flags))
    pooled_tiou = (total_hits / total_anom) if total_anom > 0 else None
    counts = {
        "videos": len(video_ids),
        "frames": int(sum(len(s) for s in all_scores)),
        "anomalous_frames": int(sum(int(f.sum()) for f in all_flags)),
        "tiou_frames": total_anom,
        "tiou_hits": total_hits if total_anom > 0 else None,
    }
    return EvalReport(pooled_auc, pooled_tiou, counts, per_video)
