"""Instruction-conditioned image embeddings trained contrastively, at desk scale."""

__version__ = "0.1.0"

from .data import INSTRUCTIONS, NEUTRAL_INSTRUCTION, Dataset, ShapeSpec, generate_colorshape, generate_continuous_color, make_dataset
from .encoders import EncoderConfig, TargetEncoder
from .estimators import ConditionedEmbedding, FocalLensEncoder, LinearProbeClassifier
from .metrics import (
    MetricReport,
    RetrievalTask,
    average_precision,
    evaluate_colorshape,
    evaluate_continuous,
    evaluate_probe,
    linear_probe,
    mean_ap,
    recall_at_k,
    scaled_map,
    spearman_rank_correlation,
)
from .training import TrainConfig, contrastive_loss, similarity_matrix, train

__all__ = [
    "INSTRUCTIONS",
    "NEUTRAL_INSTRUCTION",
    "ConditionedEmbedding",
    "Dataset",
    "EncoderConfig",
    "FocalLensEncoder",
    "LinearProbeClassifier",
    "MetricReport",
    "RetrievalTask",
    "ShapeSpec",
    "TargetEncoder",
    "TrainConfig",
    "average_precision",
    "contrastive_loss",
    "evaluate_colorshape",
    "evaluate_continuous",
    "evaluate_probe",
    "generate_colorshape",
    "generate_continuous_color",
    "linear_probe",
    "make_dataset",
    "mean_ap",
    "recall_at_k",
    "scaled_map",
    "similarity_matrix",
    "spearman_rank_correlation",
    "train",
]
