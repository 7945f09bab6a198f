"""Diffusion convolutional recurrent forecasting on road sensor graphs."""

from .data import SpeedSeries, ZScore, benchmark_graph, benchmark_series
from .graph import WeightedDigraph, build_adjacency
from .seq2seq import DCNN, DCRNN, ModelConfig, TrainConfig, build_model, predict, train

__all__ = [
    "DCNN",
    "DCRNN",
    "ModelConfig",
    "SpeedSeries",
    "TrainConfig",
    "WeightedDigraph",
    "ZScore",
    "benchmark_graph",
    "benchmark_series",
    "build_adjacency",
    "build_model",
    "predict",
    "train",
]

__version__ = "0.1.0"
