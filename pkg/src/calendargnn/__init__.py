"""Calendar-structured graph network for spatiotemporal behavior logs."""

from .config import TrainConfig
from .data import Dataset, load_log_dir, parse_log, split_dataset
from .metrics import binary_metrics, multiclass_metrics, regression_metrics
from .model import CalendarModel
from .synth import SynthConfig, generate
from .training import RunHistory, evaluate, run_seeds, train

__version__ = "0.1.0"

__all__ = [
    "TrainConfig",
    "Dataset",
    "load_log_dir",
    "parse_log",
    "split_dataset",
    "binary_metrics",
    "multiclass_metrics",
    "regression_metrics",
    "CalendarModel",
    "SynthConfig",
    "generate",
    "RunHistory",
    "evaluate",
    "run_seeds",
    "train",
]
