"""Forecast whether halo CMEs will be geoeffective from SOHO C2, EIT and MDI imagery.

The pipeline: catalog ingestion and labelling, archive retrieval with a local
cache, image preprocessing into a dataset manifest, per-instrument models
(backbone features fused into a small convolutional head), ensemble
averaging, training, evaluation and ablation.  ``synth`` generates labelled
fixtures so everything runs offline.
"""

from __future__ import annotations

__version__ = "0.1.0"

from .catalog import CmeEvent, EventCatalog, HaloClass, Label
from .ensemble import EventPrediction, aggregate_event, aggregate_instrument, decide
from .errors import CmeStormError, DataError, NumericError, UsageError
from .evaluation import brier, brier_skill, evaluate, mcc, threshold_sweep, tss
from .model import ModelSpec, Network
from .training import TrainConfig, class_weights, make_folds, make_split, train, wbce

__all__ = [
    "CmeEvent", "CmeStormError", "DataError", "EventCatalog", "EventPrediction", "HaloClass", "Label",
    "ModelSpec", "Network", "NumericError", "TrainConfig", "UsageError", "aggregate_event",
    "aggregate_instrument", "brier", "brier_skill", "class_weights", "decide", "evaluate", "make_folds",
    "make_split", "mcc", "threshold_sweep", "train", "tss", "wbce",
]
