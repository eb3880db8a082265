"""Weakly supervised video anomaly detection and localization over
precomputed frame/patch embedding streams."""

from .autodiff import Tensor
from .errors import DataError, TrainingError
from .feature_io import (
    DatasetManifest,
    EmbeddingStream,
    GroundTruth,
    SynthConfig,
    VideoLabel,
    generate_synthetic,
    read_manifest,
    read_matrix,
    read_stream,
    write_manifest,
    write_matrix,
    write_stream,
    write_synthetic,
)
from .localization import Box, LocalizeConfig, PatchGrid, SpatialHeatMap
from .losses import LossBreakdown, LossWeights
from .metrics import EvalReport, evaluate, frame_auc, tiou
from .model import ModelConfig, ModelParams, init_model_params
from .prompts import PromptParams, QuerySet, encode_prompts, load_queries
from .training import TrainConfig, TrainResult, grad_check, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "Box",
    "DataError",
    "DatasetManifest",
    "EmbeddingStream",
    "EvalReport",
    "GroundTruth",
    "LocalizeConfig",
    "LossBreakdown",
    "LossWeights",
    "ModelConfig",
    "ModelParams",
    "PatchGrid",
    "PromptParams",
    "QuerySet",
    "SpatialHeatMap",
    "SynthConfig",
    "Tensor",
    "TrainConfig",
    "TrainResult",
    "TrainingError",
    "VideoLabel",
    "encode_prompts",
    "evaluate",
    "frame_auc",
    "generate_synthetic",
    "grad_check",
    "init_model_params",
    "load_checkpoint",
    "load_queries",
    "read_manifest",
    "read_matrix",
    "read_stream",
    "save_checkpoint",
    "tiou",
    "train",
    "write_manifest",
    "write_matrix",
    "write_stream",
    "write_synthetic",
]
