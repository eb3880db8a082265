"""Training-free spatial anomaly localization.

Each patch embedding is scored by the softmax mass it assigns to the
abnormal queries against the full query pool (similarities are cosine:
both sides are L2-normalized, scaled by 1/tau). Heat maps are bilinearly
upsampled to the nominal frame size with patch-window centers as sample
points, optionally fused across two window scales, then thresholded;
4-connected components above a minimum area become boxes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DataError
from .prompts import QuerySet

FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=np.int8)


@dataclass
class PatchGrid:
    """One frame's patch embeddings at one window scale."""

    features: np.ndarray  # [H' x W' x D]
    window: int  # window side, pixels
    stride: int  # stride, pixels

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 3:
            raise DataError(f"patch grid must be [H x W x D], got shape {self.features.shape}")
        if self.window < 1 or self.stride < 1:
            raise DataError("window and stride must be positive")


@dataclass
class SpatialHeatMap:
    values: np.ndarray  # [H' x W'] in [0, 1] at grid resolution
    window: int
    stride: int
    upsampled: np.ndarray | None = None  # nominal frame size, filled by upsample()


@dataclass
class Box:
    x: int
    y: int
    w: int
    h: int
    confidence: float

    def as_tuple(self) -> tuple[int, int, int, int]:
        return self.x, self.y, self.w, self.h


def grid_shape(frame_size: tuple[int, int], window: int, stride: int) -> tuple[int, int]:
    """Cells of a sliding window over the frame: floor((size - window)/stride) + 1."""
    fh, fw = frame_size
    if window > fh or window > fw:
        raise DataError(f"window {window} exceeds frame {frame_size}")
    return (fh - window) // stride + 1, (fw - window) // stride + 1


def pool_grid(
    native: PatchGrid,
    window: int,
    stride: int,
    frame_size: tuple[int, int],
) -> PatchGrid:
    """Derive a coarser grid by area-overlap-weighted pooling of native cells.

    Stands in for re-encoding the frame at another window scale, which
    needs the upstream encoder. Native cells are treated as tiles of
    native.stride pixels whose union covers the frame.
    """
    gh, gw = grid_shape(frame_size, window, stride)
    nh, nw, d = native.features.shape

    def overlaps(n_cells: int, cell_px: float, out_cells: int) -> np.ndarray:
        w01 = np.zeros((out_cells, n_cells))
        for o in range(out_cells):
            lo, hi = o * stride, o * stride + window
            for c in range(n_cells):
                clo, chi = c * cell_px, (c + 1) * cell_px
                w01[o, c] = max(0.0, min(hi, chi) - max(lo, clo))
        return w01

    wy = overlaps(nh, frame_size[0] / nh, gh)  # [gh x nh]
    wx = overlaps(nw, frame_size[1] / nw, gw)  # [gw x nw]
    weights = wy[:, None, :, None] * wx[None, :, None, :]  # [gh x gw x nh x nw]
    weights = weights / weights.sum(axis=(2, 3), keepdims=True)
    pooled = np.einsum("ghnm,nmd->ghd", weights, native.features)
    return PatchGrid(pooled, window, stride)


def retrieve(grid: PatchGrid, queries: QuerySet, tau: float) -> SpatialHeatMap:
    """Heat in (0,1) per cell: softmax mass on the abnormal query group."""
    if tau <= 0:
        raise DataError(f"tau must be positive, got {tau}")
    if queries.normal.shape[0] < 1 or queries.abnormal.shape[0] < 1:
        raise DataError("both query groups must be non-empty")
    h, w, d = grid.features.shape
    if d != queries.dim:
        raise DataError(f"dimension mismatch: patches D={d}, queries D={queries.dim}")
    flat = grid.features.reshape(-1, d)
    norms = np.linalg.norm(flat, axis=1, keepdims=True)
    if np.any(norms < 1e-12):
        raise DataError("degenerate patch embedding: zero norm")
    flat = flat / norms
    all_q = np.concatenate([queries.abnormal, queries.normal], axis=0)
    logits = flat @ all_q.T / tau
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    mass = e[:, : queries.abnormal.shape[0]].sum(axis=1) / e.sum(axis=1)
    return SpatialHeatMap(mass.reshape(h, w), grid.window, grid.stride)


def upsample(heat: SpatialHeatMap, frame_size: tuple[int, int]) -> SpatialHeatMap:
    """Bilinear upsampling with window centers as sample points (edges clamped)."""
    fh, fw = frame_size
    up_y = _axis_interp(heat.values.shape[0], fh, heat.window, heat.stride)
    up_x = _axis_interp(heat.values.shape[1], fw, heat.window, heat.stride)
    # separable interpolation: rows then columns
    rows = up_y @ heat.values  # [fh x W']
    full = rows @ up_x.T  # [fh x fw]
    return SpatialHeatMap(heat.values, heat.window, heat.stride, upsampled=full)


def _axis_interp(cells: int, out_px: int, window: int, stride: int) -> np.ndarray:
    """Sparse-as-dense [out_px x cells] matrix of bilinear weights."""
    centers = window / 2.0 + stride * np.arange(cells)
    pix = np.arange(out_px) + 0.5
    mat = np.zeros((out_px, cells))
    if cells == 1:
        mat[:, 0] = 1.0
        return mat
    pos = (pix - centers[0]) / stride
    pos = np.clip(pos, 0.0, cells - 1.0)
    lo = np.floor(pos).astype(int)
    lo = np.minimum(lo, cells - 2)
    frac = pos - lo
    mat[np.arange(out_px), lo] = 1.0 - frac
    mat[np.arange(out_px), lo + 1] = frac
    return mat


def fuse_scales(map_a: SpatialHeatMap, map_b: SpatialHeatMap, lam: float) -> SpatialHeatMap:
    """Pixelwise blend lam*a + (1-lam)*b of two upsampled maps."""
    if not 0.0 <= lam <= 1.0:
        raise DataError(f"fusion weight must be in [0, 1], got {lam}")
    if map_a.upsampled is None or map_b.upsampled is None:
        raise DataError("fuse_scales needs maps upsampled to the nominal frame size")
    if map_a.upsampled.shape != map_b.upsampled.shape:
        raise DataError(
            f"fused maps must share the frame size: {map_a.upsampled.shape} vs {map_b.upsampled.shape}"
        )
    fused = lam * map_a.upsampled + (1.0 - lam) * map_b.upsampled
    return SpatialHeatMap(fused, map_a.window, map_a.stride, upsampled=fused)


def extract_boxes(heat: SpatialHeatMap, threshold: float, min_area: int = 1) -> list[Box]:
    """Threshold the pixel-resolution map and box 4-connected components."""
    if not 0.0 < threshold < 1.0:
        raise DataError(f"threshold must be in (0, 1), got {threshold}")
    pixels = heat.upsampled if heat.upsampled is not None else heat.values
    mask = pixels > threshold
    if not mask.any():
        return []
    labels, count = ndimage.label(mask, structure=FOUR_CONNECTED)
    boxes = []
    for idx, slc in enumerate(ndimage.find_objects(labels), start=1):
        if slc is None:
            continue
        ys, xs = slc
        region = labels[ys, xs] == idx  # other components may intrude into this bbox
        if int(region.sum()) < min_area:
            continue
        conf = float(pixels[ys, xs][region].max())
        boxes.append(
            Box(x=int(xs.start), y=int(ys.start), w=int(xs.stop - xs.start), h=int(ys.stop - ys.start),
                confidence=conf)
        )
    return boxes


@dataclass
class LocalizeConfig:
    scales: tuple[tuple[int, int], ...] = ((32, 32), (80, 48))  # (window, stride) pairs
    fusion_weight: float = 0.5  # weights the first (fine) scale
    tau: float = 0.07
    threshold: float = 0.6
    trigger: float = 0.5  # temporal score needed before a frame is localized
    min_area_cells: float = 1.0  # area floor in native fine-scale cells

    def min_area_px(self, frame_size: tuple[int, int], native_grid: tuple[int, int]) -> int:
        cell_px = (frame_size[0] / native_grid[0]) * (frame_size[1] / native_grid[1])
        return max(1, int(round(self.min_area_cells * cell_px)))


@dataclass
class FrameLocalization:
    frame: int
    heat: SpatialHeatMap  # fused (or single-scale) map, pixel resolution filled
    boxes: list[Box] = field(default_factory=list)


def localize_video(
    patch_feats: np.ndarray,
    queries: QuerySet,
    frame_size: tuple[int, int],
    config: LocalizeConfig,
    frame_scores: np.ndarray | None = None,
) -> list[FrameLocalization]:
    """Localize the frames of one video whose temporal score passes the trigger.

    With frame_scores None every frame is localized (training-free mode).
    The native patch grid is assumed to be the first configured scale; any
    further scales are derived by pooling.
    """
    if not config.scales:
        raise DataError("at least one localization scale is required")
    t, h, w, _ = patch_feats.shape
    native_window, native_stride = config.scales[0]
    expected = grid_shape(frame_size, native_window, native_stride)
    if expected != (h, w):
        raise DataError(
            f"native grid {h}x{w} does not match scale {native_window}/{native_stride} "
            f"on a {frame_size[0]}x{frame_size[1]} frame (expected {expected[0]}x{expected[1]})"
        )
    min_area = config.min_area_px(frame_size, (h, w))
    results = []
    for ti in range(t):
        if frame_scores is not None and frame_scores[ti] <= config.trigger:
            continue
        native = PatchGrid(patch_feats[ti], native_window, native_stride)
        maps = [upsample(retrieve(native, queries, config.tau), frame_size)]
        for window, stride in config.scales[1:]:
            pooled = pool_grid(native, window, stride, frame_size)
            maps.append(upsample(retrieve(pooled, queries, config.tau), frame_size))
        fused = maps[0]
        for other in maps[1:]:
            fused = fuse_scales(fused, other, config.fusion_weight)
        boxes = extract_boxes(fused, config.threshold, min_area)
        results.append(FrameLocalization(ti, fused, boxes))
    return results


def save_heatmap_png(heat: SpatialHeatMap, path):
    """Write the pixel-resolution map as an 8-bit grayscale image."""
    from PIL import Image

    pixels = heat.upsampled if heat.upsampled is not None else heat.values
    img = np.clip(np.rint(pixels * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img, mode="L").save(path)
