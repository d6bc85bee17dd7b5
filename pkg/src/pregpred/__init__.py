"""Pregnancy prediction from menstrual-cycle tracking logs.

Submodules follow the pipeline: ingest -> cycles -> codec -> (linmodel |
predictors) -> trainer -> metrics -> explain, with synth providing the
synthetic-cohort oracle and cli the command-line wiring.
"""

from .codec import (
    Batch,
    EncodedDataset,
    EncodedExample,
    FeatureSchema,
    default_schema,
    load_dataset,
    save_dataset,
)
from .cycles import Cycle, LabeledCycle, RawExample
from .ingest import DailyLog, QcReport, UserProfile
from .metrics import EvalResult, auc, decile_stratify, evaluate, six_cycle
from .predictors import (
    BmsModel,
    EmbeddingModel,
    PlainLstmModel,
    bms_probability,
    build_model,
    load_checkpoint,
    save_checkpoint,
)
from .linmodel import LinearParams, LogisticModel, lr_coefficient_trend, lr_predict
from .synth import Cohort, WorldSpec, gen_alt_process, gen_cohort
from .trainer import Hyper, HyperGrid, TrainReport, grid_search, split_by_user, train

__version__ = "0.1.0"

__all__ = [
    "Batch",
    "BmsModel",
    "Cohort",
    "Cycle",
    "DailyLog",
    "EmbeddingModel",
    "EncodedDataset",
    "EncodedExample",
    "EvalResult",
    "FeatureSchema",
    "Hyper",
    "HyperGrid",
    "LabeledCycle",
    "LinearParams",
    "LogisticModel",
    "PlainLstmModel",
    "QcReport",
    "RawExample",
    "TrainReport",
    "UserProfile",
    "WorldSpec",
    "auc",
    "bms_probability",
    "build_model",
    "decile_stratify",
    "default_schema",
    "evaluate",
    "gen_alt_process",
    "gen_cohort",
    "grid_search",
    "load_checkpoint",
    "load_dataset",
    "lr_coefficient_trend",
    "lr_predict",
    "save_checkpoint",
    "save_dataset",
    "six_cycle",
    "split_by_user",
    "train",
]
