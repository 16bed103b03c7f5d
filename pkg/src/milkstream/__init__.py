"""Streaming attention (monotonic, MoChA, MILk, wait-k) with latency-aware training."""

from .attention import AttentionConfig
from .data import TaskSpec, Vocabulary
from .errors import (ContractViolation, FormatError, InvalidArgument, MilkstreamError,
                     NumericFailure, VersionError)
from .latency import DecodeTrace, DelayVector, LatencyReport, latency_report
from .model import ModelConfig, StreamingModel, load_checkpoint, save_checkpoint
from .training import TrainConfig, evaluate, fit

__version__ = "0.1.0"

__all__ = [
    "AttentionConfig", "ContractViolation", "DecodeTrace", "DelayVector", "FormatError",
    "InvalidArgument", "LatencyReport", "MilkstreamError", "ModelConfig", "NumericFailure",
    "StreamingModel", "TaskSpec", "TrainConfig", "VersionError", "Vocabulary", "evaluate",
    "fit", "latency_report", "load_checkpoint", "save_checkpoint",
]
