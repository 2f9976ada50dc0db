"""Confidence-regularized energy inference over event, action and interaction labels."""

from ._kernels import BACKEND
from .conformal import (
    CalibrationRecord,
    CalibrationStore,
    EmptyCalibrationWarning,
    PValueTables,
    build_store,
    fisher_combined_pvalue,
    fisher_statistic,
    instance_p_tables,
    load_store,
    nonconformity,
    p_value,
    p_value_table,
    save_store,
)
from .energy import (
    CERN1,
    CERN2,
    Assignment,
    EnergyParams,
    GraphInstance,
    InvalidStateError,
    Truth,
    aggregate_vectors,
    raw_energy,
    regularized_energy,
)
from .inference import CONFIDENCE, ENERGY, REGIMES, SOFTMAX, Prediction, infer, infer_many, most_violated
from .learning import TrainConfig, loss, loss_subgradient, train

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "CalibrationRecord",
    "CalibrationStore",
    "EmptyCalibrationWarning",
    "PValueTables",
    "build_store",
    "fisher_combined_pvalue",
    "fisher_statistic",
    "instance_p_tables",
    "load_store",
    "nonconformity",
    "p_value",
    "p_value_table",
    "save_store",
    "CERN1",
    "CERN2",
    "Assignment",
    "EnergyParams",
    "GraphInstance",
    "InvalidStateError",
    "Truth",
    "aggregate_vectors",
    "raw_energy",
    "regularized_energy",
    "CONFIDENCE",
    "ENERGY",
    "REGIMES",
    "SOFTMAX",
    "Prediction",
    "infer",
    "infer_many",
    "most_violated",
    "TrainConfig",
    "loss",
    "loss_subgradient",
    "train",
    "__version__",
]
