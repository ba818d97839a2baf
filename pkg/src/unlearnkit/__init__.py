"""Desk-scale debiasing of decoder language models.

Two methods share one small numpy transformer: partitioned contrastive
gradient unlearning (:mod:`unlearnkit.pcgu`, sharded in
:mod:`unlearnkit.shard`) and task-vector negation (:mod:`unlearnkit.taskvec`).
"""

from .errors import (
    ConfigError,
    DataError,
    FormatError,
    GraphError,
    NumericError,
    ShapeError,
    ShardError,
    UnlearnError,
)
from .model import ModelConfig, ParameterSet, init_model
from .pcgu import PCGUConfig, run_pcgu
from .shard import run_pcgu_sharded
from .taskvec import apply_task_vector, compute_task_vector

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "FormatError",
    "GraphError",
    "ModelConfig",
    "NumericError",
    "PCGUConfig",
    "ParameterSet",
    "ShapeError",
    "ShardError",
    "UnlearnError",
    "apply_task_vector",
    "compute_task_vector",
    "init_model",
    "run_pcgu",
    "run_pcgu_sharded",
]
