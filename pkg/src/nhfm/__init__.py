"""Hierarchical factorization machine for user event-sequence prediction.

The package covers the full workflow: sparse feature schemas and event
encoding (:mod:`nhfm.data`), a tape-differentiated forward model
(:mod:`nhfm.model`, :mod:`nhfm.autodiff`), training with checkpoints
(:mod:`nhfm.training`, :mod:`nhfm.checkpoint`), AUC/partial-AUC evaluation
(:mod:`nhfm.metrics`), weight- and attention-based explanation
(:mod:`nhfm.explain`), and a CLI (:mod:`nhfm.cli`).
"""

from .data import (Dataset, Event, EventSequence, FeatureSchema, FieldSpec,
                   assemble_sequences, encode_event, fit_schema, split)
from .metrics import RunSummary, ScoredSet, auc, mean_ci, spauc, ttest_ind
from .model import ForwardCache, ModelConfig, Parameters, forward, init_parameters
from .synthetic import SynthSpec, synth_generate
from .training import TrainConfig, TrainResult, nll_loss, train

__version__ = "0.1.0"

__all__ = [
    "Dataset", "Event", "EventSequence", "FeatureSchema", "FieldSpec",
    "assemble_sequences", "encode_event", "fit_schema", "split",
    "RunSummary", "ScoredSet", "auc", "mean_ci", "spauc", "ttest_ind",
    "ForwardCache", "ModelConfig", "Parameters", "forward", "init_parameters",
    "SynthSpec", "synth_generate",
    "TrainConfig", "TrainResult", "nll_loss", "train",
    "__version__",
]
