from sargtr.asc_graph import DiscreteCodebook, ScatterGraph, build_graph, read_jsonl, write_jsonl
from sargtr.layers import ModelConfig, ModelParams, model_forward
from sargtr.recognizer import Recognizer
from sargtr.training import TrainConfig, evaluate, run_ablation, train
import os

config_path = os.environ.get("SARGTR_CONFIG")
log_level = os.environ.get("SARGTR_LOG_LEVEL", "INFO")

__all__ = [
    "DiscreteCodebook",
    "ScatterGraph",
    "build_graph",
    "read_jsonl",
    "write_jsonl",
    "ModelConfig",
    "ModelParams",
    "model_forward",
    "Recognizer",
    "TrainConfig",
    "train",
    "evaluate",
    "run_ablation",
    "config_path",
    "log_level",
]
