"""Medication recommendation from coded EHR visits plus clinical-note representations."""

from .emr_data import CodeVocabulary, Dataset, PatientRecord, VisitRecord, generate_synthetic, split_dataset
from .metrics import MetricsReport, compute_report
from .model import MedRecModel, ModelConfig
from .training import LossConfig, OptimizerConfig, TrainingData, train
from .visit_graph import GraphConfig, build_visit_graph

__version__ = "0.1.0"

__all__ = [
    "CodeVocabulary", "Dataset", "PatientRecord", "VisitRecord", "generate_synthetic", "split_dataset",
    "MetricsReport", "compute_report", "MedRecModel", "ModelConfig", "LossConfig", "OptimizerConfig",
    "TrainingData", "train", "GraphConfig", "build_visit_graph",
]
