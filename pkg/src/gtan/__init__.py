"""Gated temporal attention network for semi-supervised transaction fraud detection."""

from .data import (Label, Preprocessor, Schema, TransactionTable, Vocabulary, ingest_csv, write_csv)
from .experiments import (Dataset, ablate, logistic_baseline, ratio_split, run_gtan, sensitivity, sweep_ratio,
                          temporal_split)
from .graph import TemporalGraph, build_graph, build_graph_from_table, load_graph, sample_batch, save_graph
from .metrics import MetricsReport, auc, average_precision, evaluate_scores, f1_macro
from .model import GtanConfig, GtanModel, Variant, load_checkpoint, save_checkpoint
from .synth import SynthConfig, generate
from .train import TrainConfig, infer, train

__all__ = [
    "Dataset", "GtanConfig", "GtanModel", "Label", "MetricsReport", "Preprocessor", "Schema", "SynthConfig",
    "TemporalGraph", "TrainConfig", "TransactionTable", "Variant", "Vocabulary", "ablate", "auc",
    "average_precision", "build_graph", "build_graph_from_table", "evaluate_scores", "f1_macro", "generate",
    "infer", "ingest_csv", "load_checkpoint", "load_graph", "logistic_baseline", "ratio_split", "run_gtan",
    "sample_batch", "save_checkpoint", "save_graph", "sensitivity", "sweep_ratio", "temporal_split", "train",
    "write_csv",
]
