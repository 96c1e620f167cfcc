"""Benchmark harness: datasets, exact ground truth, and the mode x ef sweep."""

from .datasets import Dataset, ground_truth, load_fvecs, load_ivecs, recall_at_k, synthetic_dataset
from .runner import ReportRow, RunReport, run_experiment

__all__ = [
    "Dataset",
    "ReportRow",
    "RunReport",
    "ground_truth",
    "load_fvecs",
    "load_ivecs",
    "recall_at_k",
    "run_experiment",
    "synthetic_dataset",
]
