"""Optimizer loop, batching, checkpointing, and the gradient audit.

Gradients come from the reverse-mode tape in `autodiff`. Per-video
contributions are harvested into separate stores, sorted by video id, and
combined with a pairwise-tree sum, so batch gradients are bit-identical
under any permutation of the batch and across runs. Training runs in
float32; the finite-difference audit runs in float64.
"""

from __future__ import annotations

import json
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict

import numpy as np

from .autodiff import Tensor, relative_error
from .errors import DataError, TrainingError
from .feature_io import DatasetManifest, read_stream
from .losses import LossBreakdown, LossWeights
from .model import ModelConfig, ModelParams, init_model_params, params_from_arrays, video_losses, video_scores

CHECKPOINT_MAGIC = b"STPC"
CHECKPOINT_VERSION = 1
_CHECKPOINT_HEADER = struct.Struct("<4sHQ")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 64
    epochs: int = 200
    max_video_len: int = 256
    seed: int = 0
    alpha: float = 0.9
    beta: float = 2.0
    tau: float = 0.07
    k_divisor: int = 16
    sigma: float = 1.0
    top_patches: int = 12
    context_len: int = 8
    adapter_layers: int = 1
    ffn_dim: int | None = None
    use_spatial_attention: bool = True
    score_branch: str = "alignment"
    weight_decay: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    encoder_seed: int = 1234
    threads: int = 1

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta, self.tau, self.k_divisor)

    def model_config(self, d: int, num_classes: int) -> ModelConfig:
        return ModelConfig(
            d=d,
            num_classes=num_classes,
            context_len=self.context_len,
            top_patches=self.top_patches,
            sigma=self.sigma,
            adapter_layers=self.adapter_layers,
            ffn_dim=self.ffn_dim,
            use_spatial_attention=self.use_spatial_attention,
            encoder_seed=self.encoder_seed,
        )


@dataclass
class VideoSample:
    video_id: str
    frame_feats: np.ndarray
    patch_feats: np.ndarray
    y_b: int
    y_c: int


def load_dataset(manifest: DatasetManifest) -> list[VideoSample]:
    samples = []
    for e in manifest.entries:
        stream = read_stream(e.stream_path, e.video_id)
        samples.append(
            VideoSample(e.video_id, stream.frame_feats, stream.patch_feats, e.label.y_b, e.label.y_c)
        )
    dims = {s.frame_feats.shape[1] for s in samples}
    if len(dims) > 1:
        raise DataError(f"inconsistent feature dimensions across videos: {sorted(dims)}")
    return samples


def subsample_video(sample: VideoSample, max_len: int) -> VideoSample:
    t = sample.frame_feats.shape[0]
    if t <= max_len:
        return sample
    idx = np.rint(np.linspace(0, t - 1, max_len)).astype(np.int64)
    return VideoSample(
        sample.video_id, sample.frame_feats[idx], sample.patch_feats[idx], sample.y_b, sample.y_c
    )


def pairwise_sum(items: list):
    """Fixed-order pairwise-tree reduction (deterministic float sums)."""
    if not items:
        raise ValueError("nothing to reduce")
    while len(items) > 1:
        nxt = [items[i] + items[i + 1] for i in range(0, len(items) - 1, 2)]
        if len(items) % 2:
            nxt.append(items[-1])
        items = nxt
    return items[0]


def forward_backward(
    batch: list[VideoSample],
    params: ModelParams,
    weights: LossWeights,
    threads: int = 1,
) -> tuple[LossBreakdown, dict[str, np.ndarray]]:
    """Batch-mean losses and gradients for every learnable tensor."""
    named = params.named_parameters()

    def one_video(sample: VideoSample):
        out = video_losses(
            params, sample.frame_feats, sample.patch_feats, sample.y_b, sample.y_c, weights
        )
        values = (out.l_class.item(), out.l_align.item(), out.l_const.item(), out.total.item())
        if not all(np.isfinite(values)):
            raise TrainingError(
                f"non-finite loss for video {sample.video_id!r}: "
                f"class={values[0]} align={values[1]} const={values[2]}"
            )
        store: dict[Tensor, np.ndarray] = {}
        out.total.backward(store=store)
        grads = {name: store.get(tensor, np.zeros_like(tensor.data)) for name, tensor in named}
        return sample.video_id, values, grads

    if threads > 1 and len(batch) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one_video, batch))
    else:
        results = [one_video(s) for s in batch]

    results.sort(key=lambda r: r[0])  # batch-order independence
    n = len(results)
    sums = [pairwise_sum([r[1][i] for r in results]) for i in range(4)]
    breakdown = LossBreakdown(*(s / n for s in sums))
    grads = {name: pairwise_sum([r[2][name] for r in results]) / float(n) for name, _ in named}
    return breakdown, grads


class AdamW:
    """Decoupled-weight-decay adaptive-moment optimizer."""

    def __init__(self, named_params: list[tuple[str, Tensor]], config: TrainConfig):
        self.named_params = named_params
        self.lr = config.learning_rate
        self.beta1 = config.adam_beta1
        self.beta2 = config.adam_beta2
        self.eps = config.adam_eps
        self.weight_decay = config.weight_decay
        self.step_count = 0
        self.m = {name: np.zeros_like(t.data) for name, t in named_params}
        self.v = {name: np.zeros_like(t.data) for name, t in named_params}

    def step(self, grads: dict[str, np.ndarray]):
        self.step_count += 1
        bc1 = 1.0 - self.beta1**self.step_count
        bc2 = 1.0 - self.beta2**self.step_count
        for name, tensor in self.named_params:
            g = grads[name].astype(tensor.dtype, copy=False)
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            update = m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * tensor.data
            tensor.data = (tensor.data - self.lr * update).astype(tensor.dtype, copy=False)


@dataclass
class EpochStats:
    epoch: int
    l_class: float
    l_align: float
    l_const: float
    total: float


@dataclass
class TrainResult:
    params: ModelParams
    config: TrainConfig
    epochs_run: int
    log: list[EpochStats]
    rng_state: dict
    class_names: list[str] = field(default_factory=list)


def train(
    samples: list[VideoSample],
    config: TrainConfig,
    num_classes: int,
    class_names: list[str] | None = None,
) -> TrainResult:
    """Train on pre-loaded samples; deterministic given config and data."""
    if not samples:
        raise TrainingError("empty training set")
    labels = {s.y_b for s in samples}
    if labels == {0}:
        raise TrainingError("all-normal training set: the MIL objectives need abnormal videos")
    if labels == {1}:
        raise TrainingError("all-abnormal training set: the MIL objectives need normal videos")
    for s in samples:
        if s.y_c >= num_classes:
            raise TrainingError(f"video {s.video_id!r} has category {s.y_c} >= {num_classes}")

    d = samples[0].frame_feats.shape[1]
    params = init_model_params(config.model_config(d, num_classes), config.seed)
    weights = config.loss_weights()
    optimizer = AdamW(params.named_parameters(), config)
    rng = np.random.default_rng(config.seed)

    clipped = [subsample_video(s, config.max_video_len) for s in samples]
    frozen_before = [arr.copy() for _, arr in params.frozen_arrays()]

    log: list[EpochStats] = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(clipped))
        term_sums = np.zeros(4)
        for start in range(0, len(order), config.batch_size):
            batch = [clipped[i] for i in order[start : start + config.batch_size]]
            breakdown, grads = forward_backward(batch, params, weights, config.threads)
            optimizer.step(grads)
            contribution = len(batch)
            term_sums += contribution * np.array(
                [breakdown.l_class, breakdown.l_align, breakdown.l_const, breakdown.total]
            )
        means = term_sums / len(clipped)
        log.append(EpochStats(epoch, *(float(v) for v in means)))

    for before, (name, after) in zip(frozen_before, params.frozen_arrays()):
        if not np.array_equal(before, after):
            raise TrainingError(f"frozen tensor {name} changed during training")

    return TrainResult(
        params=params,
        config=config,
        epochs_run=config.epochs,
        log=log,
        rng_state=rng.bit_generator.state,
        class_names=list(class_names or []),
    )


def score_dataset(
    params: ModelParams,
    samples: list[VideoSample],
    tau: float,
    branch: str = "alignment",
    threads: int = 1,
) -> dict[str, np.ndarray]:
    """Per-frame anomaly scores for every video, keyed by video id."""

    def one(sample: VideoSample):
        return sample.video_id, video_scores(params, sample.frame_feats, sample.patch_feats, tau, branch)

    if threads > 1 and len(samples) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            pairs = list(pool.map(one, samples))
    else:
        pairs = [one(s) for s in samples]
    return dict(pairs)


# -- checkpoint I/O ---------------------------------------------------------


def save_checkpoint(result: TrainResult, path):
    arrays = result.params.all_arrays()
    header = {
        "format_version": CHECKPOINT_VERSION,
        "train_config": asdict(result.config),
        "model_config": asdict(result.params.config),
        "epoch": result.epochs_run,
        "rng_state": result.rng_state,  # PCG64 big ints round-trip exactly through json
        "class_names": result.class_names,
        "tensors": [
            {"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype)} for name, arr in arrays
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CHECKPOINT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path) -> TrainResult:
    with open(path, "rb") as fh:
        head = fh.read(_CHECKPOINT_HEADER.size)
        if len(head) < _CHECKPOINT_HEADER.size:
            raise DataError(f"{path}: truncated checkpoint header")
        magic, version, blob_len = _CHECKPOINT_HEADER.unpack(head)
        if magic != CHECKPOINT_MAGIC:
            raise DataError(f"{path}: bad magic {magic!r}")
        if version != CHECKPOINT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(blob_len).decode("utf-8"))
        arrays: dict[str, np.ndarray] = {}
        for spec in header["tensors"]:
            shape = tuple(spec["shape"])
            dtype = np.dtype(spec["dtype"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * dtype.itemsize)
            if len(buf) != count * dtype.itemsize:
                raise DataError(f"{path}: truncated payload for tensor {spec['name']}")
            arrays[spec["name"]] = np.frombuffer(buf, dtype=dtype).reshape(shape).copy()
        trailing = fh.read(1)
        if trailing:
            raise DataError(f"{path}: trailing bytes after payload")
    config = TrainConfig(**header["train_config"])
    mc = header["model_config"]
    model_config = ModelConfig(**mc)
    params = params_from_arrays(model_config, arrays)
    return TrainResult(
        params=params,
        config=config,
        epochs_run=int(header["epoch"]),
        log=[],
        rng_state=header["rng_state"],
        class_names=list(header["class_names"]),
    )


def write_loss_log(log: list[EpochStats], path):
    lines = ["epoch,l_class,l_align,l_const,total"]
    for row in log:
        lines.append(f"{row.epoch},{row.l_class!r},{row.l_align!r},{row.l_const!r},{row.total!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


# -- gradient audit ----------------------------------------------------------

TERM_NAMES = ("l_class", "l_align", "l_const", "total")


@dataclass
class GradCheckEntry:
    instance: int
    term: str
    tensor: str
    max_rel_err: float


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]
    tolerance: float
    seconds: float

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance

    def worst_by_pair(self) -> dict[tuple[str, str], float]:
        worst: dict[tuple[str, str], float] = {}
        for e in self.entries:
            key = (e.term, e.tensor)
            worst[key] = max(worst.get(key, 0.0), e.max_rel_err)
        return worst


def grad_check(
    instances: int = 20,
    seed: int = 2024,
    tolerance: float = 1e-4,
    max_entries_per_tensor: int = 24,
    fd_eps: float = 1e-6,
) -> GradCheckReport:
    """Audit analytic gradients of every learnable tensor against central
    finite differences, per loss term, on random small instances (float64)."""
    t_start = time.perf_counter()
    entries: list[GradCheckEntry] = []
    for inst in range(instances):
        rng = np.random.default_rng(seed + inst)
        t = int(rng.integers(3, 9))
        d = int(rng.integers(4, 9))
        c = int(rng.integers(1, 4))
        h = int(rng.integers(2, 4))
        w = int(rng.integers(2, 4))
        k_top = int(rng.integers(1, h * w + 1))
        cfg = ModelConfig(
            d=d,
            num_classes=1 + c,
            context_len=int(rng.integers(2, 4)),
            top_patches=k_top,
            sigma=float(rng.uniform(0.5, 2.0)),
            adapter_layers=1,
            ffn_dim=2 * d,
            encoder_seed=int(rng.integers(0, 10_000)),
        )
        params = init_model_params(cfg, seed=int(rng.integers(0, 10_000)), dtype=np.float64)
        # non-zero head so l_class exercises the weight path too
        params.head.weight.data = 0.3 * rng.standard_normal(d)
        params.head.bias.data = np.asarray(0.1 * rng.standard_normal())
        frame = 0.5 * rng.standard_normal((t, d))
        patch = 0.5 * rng.standard_normal((t, h, w, d))
        y_b = int(rng.integers(0, 2))
        y_c = int(rng.integers(1, 1 + c)) if y_b else 0
        weights = LossWeights(alpha=0.9, beta=2.0, tau=0.07)

        named = params.named_parameters()

        def loss_terms() -> np.ndarray:
            out = video_losses(params, frame, patch, y_b, y_c, weights)
            return np.array([out.l_class.item(), out.l_align.item(), out.l_const.item(), out.total.item()])

        out = video_losses(params, frame, patch, y_b, y_c, weights)
        analytic: dict[str, dict[str, np.ndarray]] = {}
        for term, tensor_out in zip(TERM_NAMES, (out.l_class, out.l_align, out.l_const, out.total)):
            store: dict[Tensor, np.ndarray] = {}
            tensor_out.backward(store=store)
            analytic[term] = {
                name: store.get(p, np.zeros_like(p.data)).reshape(-1) for name, p in named
            }

        for name, p in named:
            flat = p.data.reshape(-1)
            if flat.size <= max_entries_per_tensor:
                picks = np.arange(flat.size)
            else:
                picks = np.sort(rng.choice(flat.size, size=max_entries_per_tensor, replace=False))
            numeric = np.empty((4, len(picks)))
            for j, idx in enumerate(picks):
                orig = flat[idx]
                flat[idx] = orig + fd_eps
                hi = loss_terms()
                flat[idx] = orig - fd_eps
                lo = loss_terms()
                flat[idx] = orig
                numeric[:, j] = (hi - lo) / (2.0 * fd_eps)
            for row, term in enumerate(TERM_NAMES):
                err = relative_error(analytic[term][name][picks], numeric[row])
                entries.append(GradCheckEntry(inst, term, name, err))
    return GradCheckReport(entries, tolerance, time.perf_counter() - t_start)
