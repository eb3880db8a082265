"""Label prompt embeddings and retrieval query sets.

A shared learnable context (l rows of width d_tok) is prepended to each
class's frozen token, the concatenation is flattened and pushed through a
frozen random affine map followed by tanh. That stands in for the
out-of-scope frozen text encoder while preserving what the objectives
exercise: a learnable prefix flowing through a frozen nonlinear map into
one embedding row per class.

Query sets for spatial localization are plain embedding tables loaded from
matrix files; rows are unit-normalized on load.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DataError
from .feature_io import read_matrix


@dataclass
class PromptParams:
    context: Tensor  # [l x d_tok], learnable shared prefix
    class_tokens: np.ndarray  # [(1+C) x d_tok], frozen
    encoder_weight: np.ndarray  # [(l+1)*d_tok x D], frozen
    encoder_bias: np.ndarray  # [D], frozen
    encoder_seed: int

    @property
    def num_rows(self) -> int:
        return self.class_tokens.shape[0]


def init_prompt_params(
    context_len: int,
    d: int,
    num_classes: int,
    encoder_seed: int,
    rng: np.random.Generator,
    d_tok: int | None = None,
    dtype=np.float32,
) -> PromptParams:
    """Fresh params: random context (learnable), seed-derived frozen parts.

    num_classes counts the normal class, i.e. the prompt matrix has
    num_classes rows. The frozen class tokens and encoder map depend only
    on encoder_seed and the shapes, so they are reproducible without a
    checkpoint.
    """
    if context_len < 1:
        raise ValueError("context length must be at least 1")
    d_tok = d if d_tok is None else d_tok
    frozen_rng = np.random.default_rng(encoder_seed)
    fan_in = (context_len + 1) * d_tok
    weight = (frozen_rng.standard_normal((fan_in, d)) / np.sqrt(fan_in)).astype(dtype)
    bias = (0.01 * frozen_rng.standard_normal(d)).astype(dtype)
    tokens = frozen_rng.standard_normal((num_classes, d_tok)).astype(dtype)
    context = (0.02 * rng.standard_normal((context_len, d_tok))).astype(dtype)
    return PromptParams(
        context=Tensor(context, requires_grad=True),
        class_tokens=tokens,
        encoder_weight=weight,
        encoder_bias=bias,
        encoder_seed=encoder_seed,
    )


def encode_prompts(params: PromptParams) -> Tensor:
    """Prompt embedding matrix [(1+C) x D]; differentiable in the context."""
    rows = params.num_rows
    l, d_tok = params.context.shape
    ctx_flat = ad.reshape(params.context, (1, l * d_tok))
    ones = ad.constant(np.ones((rows, 1), dtype=params.context.dtype))
    tiled = ad.matmul(ones, ctx_flat)  # broadcast context to every class row
    z = ad.concat([tiled, ad.constant(params.class_tokens)], axis=1)
    out = ad.tanh(ad.matmul(z, ad.constant(params.encoder_weight)) + ad.constant(params.encoder_bias))
    norms = np.linalg.norm(out.data, axis=1)
    if np.any(norms < 1e-9):
        raise DataError("prompt encoding produced a zero row")
    return out


@dataclass
class QuerySet:
    """Unit-normalized retrieval queries split into normal/abnormal groups."""

    normal: np.ndarray  # [N_n x D]
    abnormal: np.ndarray  # [N_a x D]
    normal_texts: list[str]
    abnormal_texts: list[str]

    def __post_init__(self):
        self.normal = _normalized_queries(np.asarray(self.normal, dtype=np.float64), "normal")
        self.abnormal = _normalized_queries(np.asarray(self.abnormal, dtype=np.float64), "abnormal")
        if len(self.normal_texts) != len(self.normal):
            self.normal_texts = [f"normal query {i}" for i in range(len(self.normal))]
        if len(self.abnormal_texts) != len(self.abnormal):
            self.abnormal_texts = [f"abnormal query {i}" for i in range(len(self.abnormal))]

    @property
    def dim(self) -> int:
        return self.normal.shape[1]


def _normalized_queries(mat: np.ndarray, group: str) -> np.ndarray:
    if mat.ndim != 2 or mat.shape[0] < 1:
        raise DataError(f"{group} query group must be a non-empty matrix")
    norms = np.linalg.norm(mat, axis=1, keepdims=True)
    if np.any(norms < 1e-12):
        row = int(np.argmin(norms))
        raise DataError(f"degenerate query: {group} row {row} has zero norm")
    return mat / norms


def load_queries(path) -> QuerySet:
    """Read a queries manifest: JSON with normal/abnormal matrix paths and texts."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise DataError(f"queries file not found: {path}")
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc
    base = path.parent
    try:
        normal = read_matrix(base / doc["normal"]["path"])
        abnormal = read_matrix(base / doc["abnormal"]["path"])
    except KeyError as exc:
        raise DataError(f"{path}: missing field {exc}") from exc
    if normal.shape[1] != abnormal.shape[1]:
        raise DataError(
            f"query dimension mismatch: normal D={normal.shape[1]}, abnormal D={abnormal.shape[1]}"
        )
    return QuerySet(
        normal,
        abnormal,
        list(doc["normal"].get("texts", [])),
        list(doc["abnormal"].get("texts", [])),
    )
