"""Similarity-filtered layered GNN for fraud detection on multi-relation graphs."""

from .graph import (
    DatasetFormatError,
    DegreeStats,
    MultiRelationGraph,
    RelationCSR,
    degree_stats,
    load_graph,
    save_graph,
)
from .metrics import EvalReport, auc, evaluate, macro_f1, precision, recall
from .model import LayeredFraudGNN, ModelConfig
from .normalization import NormConfig, batch_wise_normalize, node_wise_normalize
from .similarity import SimilarityModule, select_neighbors
from .synth import SynthConfig, generate, preset
from .thresholds import ThresholdController
from .training import RunConfig, TrainResult, train

__version__ = "0.1.0"

__all__ = [
    "DatasetFormatError",
    "DegreeStats",
    "EvalReport",
    "LayeredFraudGNN",
    "ModelConfig",
    "MultiRelationGraph",
    "NormConfig",
    "RelationCSR",
    "RunConfig",
    "SimilarityModule",
    "SynthConfig",
    "ThresholdController",
    "TrainResult",
    "auc",
    "batch_wise_normalize",
    "degree_stats",
    "evaluate",
    "generate",
    "load_graph",
    "macro_f1",
    "node_wise_normalize",
    "precision",
    "preset",
    "recall",
    "save_graph",
    "select_neighbors",
    "train",
]
