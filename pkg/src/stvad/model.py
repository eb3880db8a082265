"""Model assembly: the full learnable parameter set and the per-video
forward pass composing spatial attention, the temporal adapter stack, the
classifier head, prompt encoding, and the alignment matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import heads, losses, prompts, spatial_attention, temporal_adapter
from .autodiff import Tensor


@dataclass
class ModelConfig:
    """Architecture knobs needed to rebuild a model from a checkpoint."""

    d: int
    num_classes: int  # 1 + C rows, normal class first
    context_len: int = 8
    top_patches: int = 12  # K highest-motion patches per frame
    sigma: float = 1.0
    adapter_layers: int = 1
    ffn_dim: int | None = None
    use_spatial_attention: bool = True
    encoder_seed: int = 1234

    def resolved_ffn_dim(self) -> int:
        return 4 * self.d if self.ffn_dim is None else self.ffn_dim


@dataclass
class ModelParams:
    head: heads.HeadParams
    adapters: list[temporal_adapter.AdapterParams]
    prompt: prompts.PromptParams
    config: ModelConfig

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = [(f"head.{n}", t) for n, t in self.head.tensors()]
        for i, layer in enumerate(self.adapters):
            out.extend((f"adapter{i}.{n}", t) for n, t in layer.tensors())
        out.append(("prompt.context", self.prompt.context))
        return out

    def frozen_arrays(self) -> list[tuple[str, np.ndarray]]:
        return [
            ("prompt.class_tokens", self.prompt.class_tokens),
            ("prompt.encoder_weight", self.prompt.encoder_weight),
            ("prompt.encoder_bias", self.prompt.encoder_bias),
        ]

    def all_arrays(self) -> list[tuple[str, np.ndarray]]:
        return [(n, t.data) for n, t in self.named_parameters()] + self.frozen_arrays()


def init_model_params(cfg: ModelConfig, seed: int, dtype=np.float32) -> ModelParams:
    rng = np.random.default_rng(seed)
    adapters = [
        temporal_adapter.init_adapter_params(cfg.d, cfg.resolved_ffn_dim(), cfg.sigma, rng, dtype)
        for _ in range(cfg.adapter_layers)
    ]
    prompt = prompts.init_prompt_params(
        cfg.context_len, cfg.d, cfg.num_classes, cfg.encoder_seed, rng, dtype=dtype
    )
    return ModelParams(heads.init_head_params(cfg.d, dtype), adapters, prompt, cfg)


def params_from_arrays(cfg: ModelConfig, arrays: dict[str, np.ndarray]) -> ModelParams:
    """Rebuild a ModelParams from checkpointed arrays (exact, no RNG)."""
    head = heads.HeadParams(
        weight=Tensor(arrays["head.weight"].copy(), requires_grad=True),
        bias=Tensor(arrays["head.bias"].copy(), requires_grad=True),
    )
    adapters = []
    for i in range(cfg.adapter_layers):
        fields = {}
        for name in ("w_in", "b_in", "w_out", "b_out", "ln_mix_gain", "ln_mix_bias",
                     "ln_out_gain", "ln_out_bias"):
            fields[name] = Tensor(arrays[f"adapter{i}.{name}"].copy(), requires_grad=True)
        adapters.append(temporal_adapter.AdapterParams(sigma=cfg.sigma, **fields))
    prompt = prompts.PromptParams(
        context=Tensor(arrays["prompt.context"].copy(), requires_grad=True),
        class_tokens=arrays["prompt.class_tokens"].copy(),
        encoder_weight=arrays["prompt.encoder_weight"].copy(),
        encoder_bias=arrays["prompt.encoder_bias"].copy(),
        encoder_seed=cfg.encoder_seed,
    )
    return ModelParams(head, adapters, prompt, cfg)


@dataclass
class ForwardOutputs:
    confidence: Tensor  # [T], classification branch
    alignment: Tensor  # [T x (1+C)], alignment branch
    prompt_matrix: Tensor  # [(1+C) x D]


def video_forward(params: ModelParams, frame_feats: np.ndarray, patch_feats: np.ndarray) -> ForwardOutputs:
    """Run both branches on one video's features (given as plain arrays)."""
    cfg = params.config
    ft = ad.constant(frame_feats)
    if cfg.use_spatial_attention:
        pf = ad.constant(patch_feats)
        motion = spatial_attention.motion_magnitude(pf)
        aggregated = spatial_attention.aggregate(pf, motion, cfg.top_patches)
        summed = ft + aggregated
    else:
        summed = ft
    adapted = temporal_adapter.apply_adapter_stack(summed, params.adapters)
    confidence = heads.classify(adapted, params.head)
    prompt_matrix = prompts.encode_prompts(params.prompt)
    alignment = heads.align(ft, adapted, prompt_matrix)
    return ForwardOutputs(confidence, alignment, prompt_matrix)


@dataclass
class VideoLossTensors:
    l_class: Tensor
    l_align: Tensor
    l_const: Tensor
    total: Tensor


def video_losses(
    params: ModelParams,
    frame_feats: np.ndarray,
    patch_feats: np.ndarray,
    y_b: int,
    y_c: int,
    weights: losses.LossWeights,
) -> VideoLossTensors:
    out = video_forward(params, frame_feats, patch_feats)
    t = frame_feats.shape[0]
    k = weights.k_for_length(t)
    l_class = losses.topk_class_loss(out.confidence, y_b, k)
    l_align = losses.mil_align_loss(out.alignment, y_c, k, weights.tau)
    l_const = losses.prompt_contrastive_loss(out.prompt_matrix)
    total = l_class + weights.alpha * l_align + weights.beta * l_const
    return VideoLossTensors(l_class, l_align, l_const, total)


def video_scores(
    params: ModelParams,
    frame_feats: np.ndarray,
    patch_feats: np.ndarray,
    tau: float,
    branch: str = "alignment",
) -> np.ndarray:
    """Per-frame anomaly scores from the chosen branch (inference path)."""
    out = video_forward(params, frame_feats, patch_feats)
    if branch == "alignment":
        return heads.frame_anomaly_score(out.alignment.data, tau)
    if branch == "classification":
        return np.asarray(out.confidence.data, dtype=np.float64)
    raise ValueError(f"unknown score branch {branch!r}")
