"""Multi-prototype hyperspherical invariant learning for graph classification."""

from .graphdata import DatasetSpec, Graph, generate, load_jsonl, save_jsonl
from .trainer import Checkpoint, TrainConfig, infer, load_checkpoint, save_checkpoint, train

__all__ = [
    "DatasetSpec", "Graph", "generate", "load_jsonl", "save_jsonl",
    "Checkpoint", "TrainConfig", "infer", "load_checkpoint", "save_checkpoint", "train",
]
__version__ = "0.1.0"
