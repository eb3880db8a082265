"""Distance-attention temporal adapter.

Attention between frames i and j depends only on their temporal distance:
row-softmax of -|i - j| / sigma. One adapter layer is

    mixed = LN_a( softmax(adjacency) @ x )
    out   = LN_b( FFN(mixed) + mixed )

with no positional encoding and no query/key/value projections. The FFN is
affine -> gelu -> affine with hidden width ffn_dim.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LAYER_NORM_EPS = 1e-5

_GELU_C = float(np.sqrt(2.0 / np.pi))


@dataclass
class AdapterParams:
    """One adapter layer: FFN weights/biases, two layer-norm gain/bias pairs,
    and the (non-learnable) distance scale sigma."""

    w_in: Tensor  # [D x D_ff]
    b_in: Tensor  # [D_ff]
    w_out: Tensor  # [D_ff x D]
    b_out: Tensor  # [D]
    ln_mix_gain: Tensor  # [D]
    ln_mix_bias: Tensor  # [D]
    ln_out_gain: Tensor  # [D]
    ln_out_bias: Tensor  # [D]
    sigma: float = 1.0

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")

    def tensors(self) -> list[tuple[str, Tensor]]:
        return [
            ("w_in", self.w_in),
            ("b_in", self.b_in),
            ("w_out", self.w_out),
            ("b_out", self.b_out),
            ("ln_mix_gain", self.ln_mix_gain),
            ("ln_mix_bias", self.ln_mix_bias),
            ("ln_out_gain", self.ln_out_gain),
            ("ln_out_bias", self.ln_out_bias),
        ]


def init_adapter_params(d: int, ffn_dim: int, sigma: float, rng: np.random.Generator,
                        dtype=np.float32) -> AdapterParams:
    scale_in = 1.0 / np.sqrt(d)
    scale_out = 1.0 / np.sqrt(ffn_dim)
    return AdapterParams(
        w_in=Tensor((rng.standard_normal((d, ffn_dim)) * scale_in).astype(dtype), requires_grad=True),
        b_in=Tensor(np.zeros(ffn_dim, dtype=dtype), requires_grad=True),
        w_out=Tensor((rng.standard_normal((ffn_dim, d)) * scale_out).astype(dtype), requires_grad=True),
        b_out=Tensor(np.zeros(d, dtype=dtype), requires_grad=True),
        ln_mix_gain=Tensor(np.ones(d, dtype=dtype), requires_grad=True),
        ln_mix_bias=Tensor(np.zeros(d, dtype=dtype), requires_grad=True),
        ln_out_gain=Tensor(np.ones(d, dtype=dtype), requires_grad=True),
        ln_out_bias=Tensor(np.zeros(d, dtype=dtype), requires_grad=True),
        sigma=sigma,
    )


_adjacency_cache: dict[tuple[int, float, str], np.ndarray] = {}


def distance_adjacency(length: int, sigma: float, dtype=np.float64) -> np.ndarray:
    """Row-stochastic [T x T] attention matrix from temporal distances."""
    if length < 1:
        raise ValueError("length must be at least 1")
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    key = (length, float(sigma), np.dtype(dtype).str)
    cached = _adjacency_cache.get(key)
    if cached is not None:
        return cached
    idx = np.arange(length, dtype=np.float64)
    logits = -np.abs(idx[:, None] - idx[None, :]) / float(sigma)
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    adj = (e / e.sum(axis=1, keepdims=True)).astype(dtype)
    adj.setflags(write=False)  # cached and shared across calls
    _adjacency_cache[key] = adj
    return adj


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    mu = ad.tmean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = ad.tmean(centered * centered, axis=-1, keepdims=True)
    normed = centered / ad.sqrt(var + eps)
    return normed * gain + bias


def gelu(x: Tensor) -> Tensor:
    # tanh approximation of the Gaussian error linear unit
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    return 0.5 * (x * (1.0 + ad.tanh(inner)))


def adapter_layer(x: Tensor, params: AdapterParams) -> Tensor:
    """Apply one adapter layer to a summed feature sequence [T x D]."""
    t = x.shape[0]
    adj = ad.constant(distance_adjacency(t, params.sigma, dtype=x.dtype))
    mixed = layer_norm(ad.matmul(adj, x), params.ln_mix_gain, params.ln_mix_bias)
    hidden = gelu(ad.matmul(mixed, params.w_in) + params.b_in)
    ffn = ad.matmul(hidden, params.w_out) + params.b_out
    return layer_norm(ffn + mixed, params.ln_out_gain, params.ln_out_bias)


def adapter_forward(frame_feats, aggregated, params: AdapterParams):
    """Temporally contextualized features [T x D] from the summed inputs."""
    ft = frame_feats if isinstance(frame_feats, Tensor) else Tensor(np.asarray(frame_feats))
    at = aggregated if isinstance(aggregated, Tensor) else Tensor(np.asarray(aggregated))
    if ft.shape != at.shape:
        raise ValueError(f"shape mismatch: frame {ft.shape} vs aggregated {at.shape}")
    out = adapter_layer(ft + at, params)
    if isinstance(frame_feats, Tensor) or isinstance(aggregated, Tensor):
        return out
    return out.data


def apply_adapter_stack(summed: Tensor, layers: list[AdapterParams]) -> Tensor:
    """Chain adapter layers; an empty stack is the identity."""
    out = summed
    for params in layers:
        out = adapter_layer(out, params)
    return out
