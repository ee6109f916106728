"""Temporally coherent nonparametric clustering of tracklets.

Tracklets (short runs of per-frame detections summarised by a mean feature
vector) are clustered into entities with a Chinese-restaurant-style prior
that favours giving neighbouring tracklets the same label, forbids it for
tracklets that overlap in time, and sends false detections to a wide junk
component. A segment-aware variant gates which entities may appear in each
temporal segment.
"""

from .dataset import Dataset, DatasetError, build_context, read_dataset, write_dataset
from .evaluation import EvalReport, evaluate
from .inference import FitConfig, FitResult, InvariantError, fit, fit_online
from .model import JUNK, NEW, ContractError, HyperParams, ModelState, SequenceContext, TrackletRecord
from .synthesis import SynthesisPlan, generate_tccrf, generate_tccrp

__all__ = [
    "JUNK",
    "NEW",
    "ContractError",
    "Dataset",
    "DatasetError",
    "EvalReport",
    "FitConfig",
    "FitResult",
    "HyperParams",
    "InvariantError",
    "ModelState",
    "SequenceContext",
    "SynthesisPlan",
    "TrackletRecord",
    "build_context",
    "evaluate",
    "fit",
    "fit_online",
    "generate_tccrf",
    "generate_tccrp",
    "read_dataset",
    "write_dataset",
]
