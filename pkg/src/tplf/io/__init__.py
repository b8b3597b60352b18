"""Data ingestion, checkpoint container, metrics and deployment bundles."""

from .checkpoint import Checkpoint, load_checkpoint, peek_checkpoint, save_checkpoint
from .labeled import LabeledTexts, load_labeled_texts, write_labeled_texts
from .conll import NerDataset, load_conll, write_conll
from .metrics import MetricsWriter, read_metrics, write_csv
from .pairs import PairDataset, load_pairs, write_pairs

__all__ = [
    "Checkpoint",
    "LabeledTexts",
    "MetricsWriter",
    "NerDataset",
    "PairDataset",
    "load_checkpoint",
    "load_conll",
    "load_labeled_texts",
    "load_pairs",
    "peek_checkpoint",
    "read_metrics",
    "save_checkpoint",
    "write_conll",
    "write_csv",
    "write_labeled_texts",
    "write_pairs",
]
