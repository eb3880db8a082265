"""On-disk data model: embedding streams, manifests, labels, ground truth,
and the synthetic planted-anomaly dataset generator.

Binary formats (all integers and floats little-endian):

  stream file (.stpk)
      magic "STPK" | version u16 | T,H,W,D u32 | frame block T*D f32
      | patch block T*H*W*D f32

  matrix file (.stpm), used for query/prompt embedding tables
      magic "STPM" | version u16 | rows,cols u32 | payload rows*cols f32

Manifests and ground truth are JSON. Paths inside a manifest are resolved
relative to the manifest file's directory.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .errors import DataError

STREAM_MAGIC = b"STPK"
MATRIX_MAGIC = b"STPM"
FORMAT_VERSION = 1

_STREAM_HEADER = struct.Struct("<4sHIIII")
_MATRIX_HEADER = struct.Struct("<4sHII")


def _check_finite(arr: np.ndarray, name: str):
    bad = ~np.isfinite(arr)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise DataError(f"non-finite value at index {idx} of {name}")


@dataclass
class EmbeddingStream:
    """Per-video frame features [T x D] and patch features [T x H x W x D]."""

    frame_feats: np.ndarray
    patch_feats: np.ndarray
    video_id: str = ""

    def __post_init__(self):
        self.frame_feats = np.asarray(self.frame_feats)
        self.patch_feats = np.asarray(self.patch_feats)
        if self.frame_feats.ndim != 2:
            raise DataError(f"frame_feats must be [T x D], got shape {self.frame_feats.shape}")
        if self.patch_feats.ndim != 4:
            raise DataError(f"patch_feats must be [T x H x W x D], got shape {self.patch_feats.shape}")
        t, d = self.frame_feats.shape
        tp, h, w, dp = self.patch_feats.shape
        if t < 1 or d < 1 or h < 1 or w < 1:
            raise DataError(f"degenerate stream dims T={t} D={d} H={h} W={w}")
        if (t, d) != (tp, dp):
            raise DataError(
                f"frame/patch dimension mismatch: frames are [{t}x{d}], patches [{tp}x{h}x{w}x{dp}]"
            )
        _check_finite(self.frame_feats, "frame_feats")
        _check_finite(self.patch_feats, "patch_feats")

    @property
    def length(self) -> int:
        return self.frame_feats.shape[0]

    @property
    def dim(self) -> int:
        return self.frame_feats.shape[1]

    @property
    def grid(self) -> tuple[int, int]:
        return self.patch_feats.shape[1], self.patch_feats.shape[2]


def write_stream(stream: EmbeddingStream, path):
    path = Path(path)
    t, d = stream.frame_feats.shape
    _, h, w, _ = stream.patch_feats.shape
    with open(path, "wb") as fh:
        fh.write(_STREAM_HEADER.pack(STREAM_MAGIC, FORMAT_VERSION, t, h, w, d))
        fh.write(np.ascontiguousarray(stream.frame_feats, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(stream.patch_feats, dtype="<f4").tobytes())


def read_stream(path, video_id: str | None = None) -> EmbeddingStream:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _STREAM_HEADER.size:
        raise DataError(f"{path}: truncated header")
    magic, version, t, h, w, d = _STREAM_HEADER.unpack_from(raw)
    if magic != STREAM_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}, expected {STREAM_MAGIC!r}")
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported format version {version}")
    frame_n = t * d
    patch_n = t * h * w * d
    expected = _STREAM_HEADER.size + 4 * (frame_n + patch_n)
    if len(raw) != expected:
        raise DataError(f"{path}: payload size mismatch (expected {expected} bytes, found {len(raw)})")
    payload = np.frombuffer(raw, dtype="<f4", offset=_STREAM_HEADER.size)
    frame = payload[:frame_n].reshape(t, d).copy()
    patch = payload[frame_n:].reshape(t, h, w, d).copy()
    return EmbeddingStream(frame, patch, video_id or path.stem)


def stream_header(path) -> tuple[int, int, int, int]:
    """(T, H, W, D) from a stream file without loading the payload."""
    path = Path(path)
    with open(path, "rb") as fh:
        raw = fh.read(_STREAM_HEADER.size)
    if len(raw) < _STREAM_HEADER.size:
        raise DataError(f"{path}: truncated header")
    magic, version, t, h, w, d = _STREAM_HEADER.unpack(raw)
    if magic != STREAM_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}, expected {STREAM_MAGIC!r}")
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported format version {version}")
    return t, h, w, d


def write_matrix(arr: np.ndarray, path):
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise DataError(f"matrix payload must be 2-d, got shape {arr.shape}")
    _check_finite(arr, str(path))
    with open(path, "wb") as fh:
        fh.write(_MATRIX_HEADER.pack(MATRIX_MAGIC, FORMAT_VERSION, arr.shape[0], arr.shape[1]))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_matrix(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _MATRIX_HEADER.size:
        raise DataError(f"{path}: truncated header")
    magic, version, rows, cols = _MATRIX_HEADER.unpack_from(raw)
    if magic != MATRIX_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}, expected {MATRIX_MAGIC!r}")
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported format version {version}")
    expected = _MATRIX_HEADER.size + 4 * rows * cols
    if len(raw) != expected:
        raise DataError(f"{path}: payload size mismatch (expected {expected} bytes, found {len(raw)})")
    mat = np.frombuffer(raw, dtype="<f4", offset=_MATRIX_HEADER.size).reshape(rows, cols).copy()
    _check_finite(mat, str(path))
    return mat


# -- labels, ground truth, manifest ----------------------------------------


@dataclass(frozen=True)
class VideoLabel:
    """Binary label plus category index; index 0 is the normal class."""

    y_b: int
    y_c: int

    def __post_init__(self):
        if self.y_b not in (0, 1):
            raise DataError(f"y_b must be 0 or 1, got {self.y_b}")
        if (self.y_b == 0) != (self.y_c == 0):
            raise DataError(f"label inconsistency: y_b={self.y_b} but y_c={self.y_c}")
        if self.y_c < 0:
            raise DataError(f"negative category index {self.y_c}")


@dataclass
class GroundTruth:
    """Per-frame anomaly flags and per-frame box lists in pixel coordinates."""

    frame_flags: np.ndarray
    boxes: list  # one list of [x, y, w, h] per frame

    def __post_init__(self):
        self.frame_flags = np.asarray(self.frame_flags, dtype=np.int64)
        if self.frame_flags.ndim != 1:
            raise DataError("frame_flags must be a vector")
        if not np.isin(self.frame_flags, (0, 1)).all():
            raise DataError("frame_flags must be binary")
        if len(self.boxes) != len(self.frame_flags):
            raise DataError("boxes list length must match frame_flags")
        for t, (flag, frame_boxes) in enumerate(zip(self.frame_flags, self.boxes)):
            if flag == 0 and frame_boxes:
                raise DataError(f"boxes present on unflagged frame {t}")

    def validate_bounds(self, frame_size: tuple[int, int]):
        fh, fw = frame_size
        for t, frame_boxes in enumerate(self.boxes):
            for x, y, w, h in frame_boxes:
                if x < 0 or y < 0 or w <= 0 or h <= 0 or x + w > fw or y + h > fh:
                    raise DataError(f"box {(x, y, w, h)} on frame {t} outside {fh}x{fw} frame")


def write_ground_truth(gt: GroundTruth, path, video_id: str = ""):
    doc = {
        "video_id": video_id,
        "frame_flags": [int(f) for f in gt.frame_flags],
        "boxes": [[[float(v) for v in box] for box in frame] for frame in gt.boxes],
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def read_ground_truth(path) -> GroundTruth:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc
    try:
        return GroundTruth(np.asarray(doc["frame_flags"]), doc["boxes"])
    except KeyError as exc:
        raise DataError(f"{path}: missing field {exc}") from exc


@dataclass
class ManifestEntry:
    video_id: str
    label: VideoLabel
    stream_path: Path
    gt_path: Path | None = None


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    class_names: list[str]
    nominal_frame_size: tuple[int, int]  # (height, width) pixels

    def __post_init__(self):
        if not self.class_names:
            raise DataError("class_names must not be empty")
        seen = set()
        for e in self.entries:
            if e.video_id in seen:
                raise DataError(f"duplicate video_id {e.video_id!r}")
            seen.add(e.video_id)
            if e.label.y_c >= len(self.class_names):
                raise DataError(
                    f"{e.video_id}: category index {e.label.y_c} out of range for "
                    f"{len(self.class_names)} classes"
                )

    @property
    def num_abnormal_classes(self) -> int:
        return len(self.class_names) - 1


def _manifest_path_str(p: Path, base: Path) -> str:
    if p.is_absolute():
        try:
            return str(p.relative_to(base))
        except ValueError:
            return str(p)
    return str(p)


def write_manifest(manifest: DatasetManifest, path):
    base = Path(path).parent
    doc = {
        "format_version": FORMAT_VERSION,
        "class_names": manifest.class_names,
        "nominal_frame_size": list(manifest.nominal_frame_size),
        "entries": [
            {
                "video_id": e.video_id,
                "y_b": e.label.y_b,
                "y_c": e.label.y_c,
                "stream": _manifest_path_str(e.stream_path, base),
                "ground_truth": _manifest_path_str(e.gt_path, base) if e.gt_path is not None else None,
            }
            for e in manifest.entries
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise DataError(f"manifest not found: {path}")
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc
    base = path.parent
    entries = []
    try:
        for raw in doc.get("entries", []):
            stream = base / raw["stream"]
            if not stream.exists():
                raise DataError(f"{raw['video_id']}: stream file missing: {stream}")
            gt = None
            if raw.get("ground_truth"):
                gt = base / raw["ground_truth"]
                if not gt.exists():
                    raise DataError(f"{raw['video_id']}: ground truth file missing: {gt}")
            entries.append(
                ManifestEntry(
                    video_id=raw["video_id"],
                    label=VideoLabel(int(raw["y_b"]), int(raw["y_c"])),
                    stream_path=stream,
                    gt_path=gt,
                )
            )
        size = doc.get("nominal_frame_size", [224, 224])
        class_names = list(doc["class_names"])
    except KeyError as exc:
        raise DataError(f"{path}: missing field {exc}") from exc
    return DatasetManifest(entries, class_names, (int(size[0]), int(size[1])))


# -- synthetic planted-anomaly data -----------------------------------------


@dataclass
class SynthConfig:
    """Knobs for the planted-anomaly generator.

    `contrast` in [0, 1] interpolates each anomaly prototype between the
    background centroid (0: indistinguishable) and an independent random
    direction (1: fully separated).
    """

    train_videos: int = 60
    test_videos: int = 40
    t_range: tuple[int, int] = (32, 64)
    d: int = 32
    h: int = 7
    w: int = 7
    c: int = 3
    extent_range: tuple[int, int] = (2, 4)  # anomaly block side, in patch cells
    span_range: tuple[int, int] = (8, 24)  # anomaly duration, in frames
    noise_scale: float = 0.1
    contrast: float = 0.9
    num_background: int = 3
    nominal_frame_size: tuple[int, int] = (224, 224)
    seed: int = 7

    def __post_init__(self):
        if min(self.train_videos, self.test_videos, self.d, self.h, self.w, self.c) < 1:
            raise DataError("all counts in SynthConfig must be positive")
        if self.num_background < 1:
            raise DataError("need at least one background prototype")
        if not (1 <= self.extent_range[0] <= self.extent_range[1]):
            raise DataError(f"bad extent_range {self.extent_range}")
        if self.extent_range[1] > min(self.h, self.w):
            raise DataError(f"extent_range {self.extent_range} exceeds {self.h}x{self.w} grid")
        if not (1 <= self.span_range[0] <= self.span_range[1]):
            raise DataError(f"bad span_range {self.span_range}")
        if self.span_range[0] > self.t_range[0]:
            raise DataError(f"minimum span {self.span_range[0]} exceeds minimum length {self.t_range[0]}")
        if not (1 <= self.t_range[0] <= self.t_range[1]):
            raise DataError(f"bad t_range {self.t_range}")
        if self.noise_scale < 0:
            raise DataError("noise_scale must be non-negative")


@dataclass
class SynthVideo:
    stream: EmbeddingStream
    label: VideoLabel
    gt: GroundTruth | None


@dataclass
class SynthDataset:
    train: list[SynthVideo]
    test: list[SynthVideo]
    class_names: list[str]
    nominal_frame_size: tuple[int, int]
    background_prototypes: np.ndarray  # [num_background x D], unit rows
    class_prototypes: np.ndarray  # [C x D], unit rows


def _unit_rows(mat: np.ndarray) -> np.ndarray:
    return mat / np.linalg.norm(mat, axis=1, keepdims=True)


def generate_synthetic(cfg: SynthConfig) -> SynthDataset:
    """Build the dataset in memory; see write_synthetic for the on-disk form.

    Normal videos are static: each patch cell holds one background
    prototype plus a noise draw frozen over time. Abnormal videos replace a
    contiguous temporal span x spatial block with an anomaly-class
    prototype whose noise is redrawn every frame, so planted regions are
    the only moving content. Frame features are the mean over patch cells.
    """
    rng = np.random.default_rng(cfg.seed)
    bg = _unit_rows(rng.standard_normal((cfg.num_background, cfg.d)))
    bg_centroid = bg.mean(axis=0)
    bg_centroid = bg_centroid / max(np.linalg.norm(bg_centroid), 1e-12)
    raw_dirs = _unit_rows(rng.standard_normal((cfg.c, cfg.d)))
    protos = _unit_rows(cfg.contrast * raw_dirs + (1.0 - cfg.contrast) * bg_centroid)

    class_names = ["normal"] + [f"anomaly_{i}" for i in range(1, cfg.c + 1)]
    fh, fw = cfg.nominal_frame_size
    cell_h, cell_w = fh / cfg.h, fw / cfg.w

    def make_video(video_id: str, abnormal: bool, klass: int, with_gt: bool) -> SynthVideo:
        t = int(rng.integers(cfg.t_range[0], cfg.t_range[1] + 1))
        assignment = rng.integers(0, cfg.num_background, size=(cfg.h, cfg.w))
        base = bg[assignment] + cfg.noise_scale * rng.standard_normal((cfg.h, cfg.w, cfg.d))
        patches = np.broadcast_to(base, (t, cfg.h, cfg.w, cfg.d)).copy()
        flags = np.zeros(t, dtype=np.int64)
        boxes: list[list[list[float]]] = [[] for _ in range(t)]
        if abnormal:
            span = int(rng.integers(cfg.span_range[0], min(cfg.span_range[1], t) + 1))
            t0 = int(rng.integers(0, t - span + 1))
            eh = int(rng.integers(cfg.extent_range[0], cfg.extent_range[1] + 1))
            ew = int(rng.integers(cfg.extent_range[0], cfg.extent_range[1] + 1))
            h0 = int(rng.integers(0, cfg.h - eh + 1))
            w0 = int(rng.integers(0, cfg.w - ew + 1))
            proto = protos[klass - 1]
            for ti in range(t0, t0 + span):
                jitter = cfg.noise_scale * rng.standard_normal((eh, ew, cfg.d))
                patches[ti, h0 : h0 + eh, w0 : w0 + ew] = proto + jitter
            flags[t0 : t0 + span] = 1
            box = [w0 * cell_w, h0 * cell_h, ew * cell_w, eh * cell_h]
            for ti in range(t0, t0 + span):
                boxes[ti] = [list(box)]
        patches32 = patches.astype(np.float32)
        frames32 = patches32.mean(axis=(1, 2))
        stream = EmbeddingStream(frames32, patches32, video_id)
        label = VideoLabel(1 if abnormal else 0, klass if abnormal else 0)
        gt = GroundTruth(flags, boxes) if with_gt else None
        return SynthVideo(stream, label, gt)

    def make_split(prefix: str, count: int, with_gt: bool) -> list[SynthVideo]:
        vids = []
        for i in range(count):
            abnormal = i % 2 == 1
            klass = 1 + (i // 2) % cfg.c if abnormal else 0
            vids.append(make_video(f"{prefix}_{i:04d}", abnormal, klass, with_gt and abnormal))
        return vids

    train = make_split("train", cfg.train_videos, with_gt=False)
    test = make_split("test", cfg.test_videos, with_gt=True)
    return SynthDataset(train, test, class_names, cfg.nominal_frame_size, bg, protos)


def write_synthetic(cfg: SynthConfig, out_dir) -> dict:
    """Generate and write the full dataset tree; returns the written paths.

    Layout under out_dir:
      train_manifest.json, test_manifest.json
      streams/<video_id>.stpk
      gt/<video_id>.json            (abnormal test videos)
      queries.json + queries_normal.stpm + queries_abnormal.stpm
    """
    out = Path(out_dir)
    (out / "streams").mkdir(parents=True, exist_ok=True)
    (out / "gt").mkdir(exist_ok=True)
    data = generate_synthetic(cfg)

    def dump_split(videos: list[SynthVideo], manifest_name: str) -> Path:
        entries = []
        for v in videos:
            stream_rel = Path("streams") / f"{v.stream.video_id}.stpk"
            write_stream(v.stream, out / stream_rel)
            gt_rel = None
            if v.gt is not None:
                gt_rel = Path("gt") / f"{v.stream.video_id}.json"
                write_ground_truth(v.gt, out / gt_rel, v.stream.video_id)
            entries.append(ManifestEntry(v.stream.video_id, v.label, stream_rel, gt_rel))
        manifest = DatasetManifest(entries, data.class_names, data.nominal_frame_size)
        path = out / manifest_name
        write_manifest(manifest, path)
        return path

    train_manifest = dump_split(data.train, "train_manifest.json")
    test_manifest = dump_split(data.test, "test_manifest.json")

    write_matrix(data.background_prototypes, out / "queries_normal.stpm")
    write_matrix(data.class_prototypes, out / "queries_abnormal.stpm")
    queries_doc = {
        "normal": {
            "path": "queries_normal.stpm",
            "texts": [f"background prototype {i}" for i in range(cfg.num_background)],
        },
        "abnormal": {
            "path": "queries_abnormal.stpm",
            "texts": data.class_names[1:],
        },
    }
    queries_path = out / "queries.json"
    queries_path.write_text(json.dumps(queries_doc, indent=1) + "\n")

    config_used = out / "synth_config.json"
    config_used.write_text(json.dumps(asdict(cfg), indent=1) + "\n")
    return {
        "train_manifest": train_manifest,
        "test_manifest": test_manifest,
        "queries": queries_path,
        "config": config_used,
    }
