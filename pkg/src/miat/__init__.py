"""Maneuver-intention-aware trajectory prediction with attention encoders."""
from .data import (DatasetSplit, GaussianTrajectory, GridSpec, Lateral, Longitudinal, ManeuverDistribution,
                   ManeuverLabel, PredictionOutput, TrajectorySample, VehicleRecord, mode_from_index, mode_index)
from .model import MIAT, ModelConfig, VanillaTransformer, build_model, count_parameters
from .objectives import LossConfig
from .training import TrainConfig, train

__all__ = [
    "DatasetSplit", "GaussianTrajectory", "GridSpec", "Lateral", "Longitudinal", "ManeuverDistribution",
    "ManeuverLabel", "PredictionOutput", "TrajectorySample", "VehicleRecord", "mode_from_index", "mode_index",
    "MIAT", "ModelConfig", "VanillaTransformer", "build_model", "count_parameters", "LossConfig",
    "TrainConfig", "train",
]
__version__ = "0.1.0"
