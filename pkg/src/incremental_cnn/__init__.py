"""Incremental training of convolutional networks.

The backbone of a network is split into sub-networks that are added to the
live model one at a time, each initialized by a short look-ahead phase over
the frozen, already-trained prefix.
"""
from .estimator import IncrementalCNNClassifier
from .exceptions import (ComparisonError, ConfigurationError, DataError, DimensionError,
                         FormatError, IncrementalCNNError, NumericError, PartitionError,
                         UsageError)
from .growth import (GrowthConfig, GrowthController, GrowthState, fit_window_angle,
                     run_incremental, run_regular, should_stop_stage)
from .model import ModelState, backward, build_model, count_params, forward, he_init
from .optim import OptimConfig, rmsprop_step
from .partition import Partition, partition_by_filter_groups, validate_partition
from .specs import ClassifierSpec, LayerSpec, NetworkSpec, builtin_network
from .training import MetricsRecord, TrainConfig

__version__ = "0.1.0"

__all__ = [
    "IncrementalCNNClassifier", "GrowthConfig", "GrowthController", "GrowthState",
    "fit_window_angle", "should_stop_stage", "run_incremental", "run_regular", "ModelState",
    "build_model", "forward", "backward", "count_params", "he_init", "OptimConfig",
    "rmsprop_step", "Partition", "partition_by_filter_groups", "validate_partition",
    "LayerSpec", "ClassifierSpec", "NetworkSpec", "builtin_network", "MetricsRecord",
    "TrainConfig", "IncrementalCNNError", "DimensionError", "ConfigurationError", "DataError",
    "FormatError", "UsageError", "NumericError", "PartitionError", "ComparisonError",
]
