from .engine import AdaptationConfig, ModelPair, predict_pair, run_scenario, tta_step
from .losses import gce_loss, tta_loss
from .runlog import RunLog, StepRecord
from .selection import ConfidenceDifference, ConfidenceThreshold, EntropyThreshold, SelectAll, select

__all__ = [
    "AdaptationConfig",
    "ConfidenceDifference",
    "ConfidenceThreshold",
    "EntropyThreshold",
    "ModelPair",
    "RunLog",
    "SelectAll",
    "StepRecord",
    "gce_loss",
    "predict_pair",
    "run_scenario",
    "select",
    "tta_loss",
    "tta_step",
]
