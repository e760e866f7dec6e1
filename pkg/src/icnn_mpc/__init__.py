"""Input convex neural network dynamics models and MPC for room temperature control."""

from .features import FEATURES, Dataset, build_features, read_records, resample, write_records
from .model import TABLE1, Family, IcnnModel
from .mpc import ComfortSchedule, CobylaSolver, MpcController, MpcProblem, MpcSolution, eliminate_slack, solve
from .networks import (
    Activation,
    FicnnParams,
    InvariantError,
    Mode,
    PicnnParams,
    check_invariants,
    ficnn_forward,
    picnn_forward,
    project_feasible,
)
from .rollout import DisturbanceTrace, RolloutHistory, RolloutPlan, audit_convexity, predict_trajectory
from .training import FoldReport, TrainConfig, fit_model, kfold_evaluate, train

__version__ = "0.1.0"

__all__ = [
    "FEATURES", "TABLE1", "Activation", "CobylaSolver", "ComfortSchedule", "Dataset",
    "DisturbanceTrace", "Family", "FicnnParams", "FoldReport", "IcnnModel", "InvariantError",
    "Mode", "MpcController", "MpcProblem", "MpcSolution", "PicnnParams", "RolloutHistory",
    "RolloutPlan", "TrainConfig", "audit_convexity", "build_features", "check_invariants",
    "eliminate_slack", "ficnn_forward", "fit_model", "kfold_evaluate", "picnn_forward",
    "predict_trajectory", "project_feasible", "read_records", "resample", "solve", "train",
    "write_records",
]
